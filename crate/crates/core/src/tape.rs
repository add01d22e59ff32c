//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in creation order, which is already
//! a topological order; [`Graph::backward`] walks it once in reverse. All
//! values are 2-D row-major `f64` buffers (scalars are `1 x 1`).
//!
//! Loss functions are fused primitives whose local gradient is computed
//! during the forward pass; the finite-difference checker in
//! [`crate::gradcheck`] is what keeps those hand-derived adjoints honest.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};
use crate::tensor::{ParamStore, Tensor};

/// Test hook: when set, the depth-loss adjoint is scaled by 1.01 so the
/// gradient checker has a known-bad case to reject.
#[doc(hidden)]
pub static CORRUPT_DEPTH_ADJOINT: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Vec<f64>),
    Gelu(NodeId),
    Softplus(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        /// Post-softmax (pre-dropout) probabilities, `heads x n x n`.
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    MeanRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    MaxRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Im2Col {
        x: NodeId,
        h: usize,
        w: usize,
    },
    Upsample {
        x: NodeId,
        h: usize,
        w: usize,
    },
    Patchify {
        x: NodeId,
        h: usize,
        w: usize,
        p: usize,
    },
    BackProject {
        depth: NodeId,
        dirs: Vec<[f64; 3]>,
    },
    Sum(NodeId),
    /// Fused scalar loss with its precomputed local gradient.
    Loss {
        inputs: Vec<(NodeId, Vec<f64>)>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

/// Computation tape. One graph per forward/backward pass; never shared
/// across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
    dropout: Option<Dropout>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].as_deref()
    }

    /// Gradient of the parameter with store index `idx`, if it was reached.
    pub fn param(&self, idx: usize) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(i, _)| *i == idx)
            .and_then(|(_, id)| self.node(*id))
    }

    /// Writes grads into every `requires_grad` tensor of `store`
    /// (accumulating); unreachable tensors receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for idx in 0..store.len() {
            let g = self.param(idx).map(<[f64]>::to_vec);
            let (_, t) = store.by_index_mut(idx);
            if !t.requires_grad {
                continue;
            }
            let n = t.numel();
            let buf = t.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = g {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact Gaussian-CDF GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Bilinear x2 (half-pixel centers) source taps for one axis.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables dropout with keep-probability `1 - p`, drawing masks from `rng`.
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some(Dropout { p, rng });
        }
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node tensor")
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<NodeId> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::dim(
                "input",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, value.len()),
            ));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// Differentiable leaf not backed by a parameter store (used in tests
    /// and the gradient checker).
    pub fn variable(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<NodeId> {
        let id = self.input(rows, cols, value)?;
        self.nodes[id.0].needs_grad = true;
        Ok(id)
    }

    /// Leaf for parameter `name`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        if let Some(&id) = self.param_nodes.get(&idx) {
            return Ok(id);
        }
        let t = store.by_index(idx).1;
        let (r, c) = t.dims2();
        let id = self.push(r, c, t.data().to_vec(), Op::Param, t.requires_grad);
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let out = crate::linalg::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim("add", format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    /// `a[n x m] + b[1 x m]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(b);
        if br != 1 || bc != c {
            return Err(Error::dim("add_row", format!("{r}x{c} + {br}x{bc}")));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::AddRow(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    pub fn mul_const(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dim("mul_const", "mask length"));
        }
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::MulConst(a, mask), ng))
    }

    /// Inverted dropout; identity when the graph has no dropout configured.
    pub fn dropout(&mut self, a: NodeId) -> Result<NodeId> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(a);
        };
        let keep = 1.0 - d.p;
        let n = self.nodes[a.0].value.len();
        let mask = (0..n)
            .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&x| softplus_scalar(x)).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Softplus(a), ng)
    }

    /// Row-wise layer norm with learned scale/shift (`eps = 1e-5`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(Error::dim("layer_norm", "scale/shift width"));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + 1e-5).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| v * g[j] + b[j]))
            .collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over rows of `q`, `k`, `v`
    /// (`n x d` each, heads split along columns). When `causal`, query `i`
    /// only sees keys `<= i`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> Result<NodeId> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) {
            return Err(Error::dim("attention", "q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        for h in 0..heads {
            let s = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(
                n,
                dh,
                n,
                scale,
                View::rm(self.value(q), d).at(h * dh),
                View::t(self.value(k), d).at(h * dh),
                0.0,
                s,
                0,
                n,
            );
            if causal {
                for i in 0..n {
                    for j in i + 1..n {
                        s[i * n + j] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(s, n);
        }
        let keep = match self.dropout.as_mut() {
            Some(dr) => {
                let kp = 1.0 - dr.p;
                Some(
                    (0..probs.len())
                        .map(|_| if dr.rng.gen::<f64>() < kp { 1.0 / kp } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            }
            None => None,
        };
        let dropped: Vec<f64> = match &keep {
            Some(m) => probs.iter().zip(m).map(|(p, m)| p * m).collect(),
            None => probs.clone(),
        };
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            gemm(
                n,
                n,
                dh,
                1.0,
                View::rm(&dropped, n).at(h * n * n),
                View::rm(self.value(v), d).at(h * dh),
                0.0,
                &mut out,
                h * dh,
                d,
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            n,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                keep,
            },
            ng,
        ))
    }

    /// Attention probabilities (pre-dropout) of an attention node,
    /// `heads x n x n`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::dim("gather", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Domain(format!("index {bad} outside table of {r} rows")));
        }
        let tv = self.value(table);
        let out = ids.iter().flat_map(|&i| tv[i * c..(i + 1) * c].iter().copied()).collect();
        let ng = self.ng(table);
        Ok(self.push(ids.len(), c, out, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::dim("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", format!("[{start}, {}) of {r} rows", start + len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(len, c, out, Op::SliceRows { x, start }, ng))
    }

    /// Reinterprets the row-major values of `x` as `rows x cols`.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if rows * cols != r * c || rows == 0 {
            return Err(Error::dim("reshape", format!("{r}x{c} into {rows}x{cols}")));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(rows, cols, out, Op::Reshape(x), ng))
    }

    /// Mean over the listed rows, `1 x cols`.
    pub fn mean_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::dim("mean_rows", "row selection"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; c];
        for &i in rows {
            for (o, v) in out.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(x);
        Ok(self.push(1, c, out, Op::MeanRows { x, rows: rows.to_vec() }, ng))
    }

    pub fn mean_all_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let rows: Vec<usize> = (0..self.dims(x).0).collect();
        self.mean_rows(x, &rows)
    }

    /// Column-wise max over rows (first index wins ties), `1 x cols`.
    pub fn max_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = xv[..c].to_vec();
        let mut argmax = vec![0; c];
        for i in 1..r {
            for j in 0..c {
                let v = xv[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let ng = self.ng(x);
        self.push(1, c, out, Op::MaxRows { x, argmax }, ng)
    }

    /// 3x3 zero-padded patch extraction on an `h x w` grid stored as
    /// `(h*w) x C`; output `(h*w) x 9C` ordered `(ky, kx, c)`.
    pub fn im2col3x3(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if r != h * w {
            return Err(Error::dim("im2col3x3", format!("{r} rows for {h}x{w} grid")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; r * 9 * c];
        for y in 0..h {
            for xx in 0..w {
                let o = (y * w + xx) * 9 * c;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let s = (sy as usize * w + sx as usize) * c;
                        let t = o + (ky * 3 + kx) * c;
                        out[t..t + c].copy_from_slice(&xv[s..s + c]);
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(r, 9 * c, out, Op::Im2Col { x, h, w }, ng))
    }

    /// Bilinear x2 upsampling (half-pixel centers, edge clamped) of an
    /// `h x w` grid stored as `(h*w) x C`.
    pub fn upsample2x(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if r != h * w {
            return Err(Error::dim("upsample2x", format!("{r} rows for {h}x{w} grid")));
        }
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let xv = self.value(x);
        let w2 = 2 * w;
        let mut out = vec![0.0; 4 * r * c];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let o = (oy * w2 + ox) * c;
                let taps = [
                    (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
                    (y0 * w + x1, (1.0 - ly) * lx),
                    (y1 * w + x0, ly * (1.0 - lx)),
                    (y1 * w + x1, ly * lx),
                ];
                for (src, wt) in taps {
                    for j in 0..c {
                        out[o + j] += wt * xv[src * c + j];
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(4 * r, c, out, Op::Upsample { x, h, w }, ng))
    }

    /// Non-overlapping `p x p` patches of an `h x w` grid stored as
    /// `(h*w) x C`; output `(h/p * w/p) x (p*p*C)` ordered `(py, px, c)`.
    pub fn patchify(&mut self, x: NodeId, h: usize, w: usize, p: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if r != h * w {
            return Err(Error::dim("patchify", format!("{r} rows for {h}x{w} grid")));
        }
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("{h}x{w} grid not divisible into {p}x{p} patches")));
        }
        let out = patchify_values(self.value(x), h, w, c, p);
        let (gh, gw) = (h / p, w / p);
        let ng = self.ng(x);
        Ok(self.push(gh * gw, p * p * c, out, Op::Patchify { x, h, w, p }, ng))
    }

    /// Points `depth[i] * dirs[i] + origin`, with `depth` an `n x 1` node.
    pub fn back_project(&mut self, depth: NodeId, dirs: Vec<[f64; 3]>, origin: [f64; 3]) -> Result<NodeId> {
        let (r, c) = self.dims(depth);
        if c != 1 || r != dirs.len() {
            return Err(Error::dim("back_project", format!("{r}x{c} depth for {} rays", dirs.len())));
        }
        let dv = self.value(depth);
        let out = dirs
            .iter()
            .zip(dv)
            .flat_map(|(a, &d)| (0..3).map(move |k| d * a[k] + origin[k]))
            .collect();
        let ng = self.ng(depth);
        Ok(self.push(r, 3, out, Op::BackProject { depth, dirs }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], Op::Sum(x), ng)
    }

    /// Registers a fused scalar loss. `inputs` pairs each differentiated
    /// node with `d loss / d node`.
    pub fn fused_loss(&mut self, value: f64, inputs: Vec<(NodeId, Vec<f64>)>) -> Result<NodeId> {
        for (id, g) in &inputs {
            if g.len() != self.value(*id).len() {
                return Err(Error::dim("fused_loss", "local gradient length"));
            }
        }
        if !value.is_finite() {
            return Err(Error::numeric("loss", format!("non-finite value {value}")));
        }
        let ng = inputs.iter().any(|(id, _)| self.ng(*id));
        Ok(self.push(1, 1, vec![value], Op::Loss { inputs }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let params = self.param_nodes.iter().map(|(&i, &id)| (i, id)).collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |id: NodeId| self.nodes[id.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                if self.ng(*a) {
                    let ga = add_into(&mut grads[a.0], m * k);
                    gemm(m, n, k, 1.0, View::rm(gout, n), View::t(self.value(*b), n), 1.0, ga, 0, k);
                }
                if self.ng(*b) {
                    let gb = add_into(&mut grads[b.0], k * n);
                    gemm(k, m, n, 1.0, View::t(self.value(*a), k), View::rm(gout, n), 1.0, gb, 0, n);
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.ng(*id) {
                        let g = add_into(&mut grads[id.0], gout.len());
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    let g = add_into(&mut grads[a.0], gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if self.ng(*b) {
                    let c = node.cols;
                    let g = add_into(&mut grads[b.0], c);
                    for row in gout.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    let g = add_into(&mut grads[a.0], gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * bv[i];
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let g = add_into(&mut grads[b.0], gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let g = add_into(&mut grads[a.0], gout.len());
                g.iter_mut().zip(gout).for_each(|(x, y)| *x += y * s);
            }
            Op::MulConst(a, m) => {
                let g = add_into(&mut grads[a.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * m[i];
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let g = add_into(&mut grads[a.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * gelu_grad(av[i]);
                }
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                let g = add_into(&mut grads[a.0], gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * sigmoid(av[i]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.cols;
                let gv = self.value(*gamma);
                if self.ng(*gamma) {
                    let g = add_into(&mut grads[gamma.0], c);
                    for (row, xr) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += row[j] * xr[j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let g = add_into(&mut grads[beta.0], c);
                    for row in gout.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                if self.ng(*x) {
                    let g = add_into(&mut grads[x.0], gout.len());
                    let cf = c as f64;
                    for (i, (row, xr)) in gout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let gh = row[j] * gv[j];
                            s1 += gh;
                            s2 += gh * xr[j];
                        }
                        for j in 0..c {
                            let gh = row[j] * gv[j];
                            g[i * c + j] += inv_std[i] * (gh - s1 / cf - xr[j] * s2 / cf);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                keep,
            } => {
                let n = node.rows;
                let d = node.cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; n * n];
                let mut pd = vec![0.0; n * n];
                for h in 0..*heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    match keep {
                        Some(m) => {
                            for i in 0..n * n {
                                pd[i] = p[i] * m[h * n * n + i];
                            }
                        }
                        None => pd.copy_from_slice(p),
                    }
                    // dV_h = Pd^T dO_h
                    gemm(n, n, dh, 1.0, View::t(&pd, n), View::rm(gout, d).at(h * dh), 0.0, &mut dv, h * dh, d);
                    // dPd = dO_h V_h^T
                    gemm(n, dh, n, 1.0, View::rm(gout, d).at(h * dh), View::t(vv, d).at(h * dh), 0.0, &mut dp, 0, n);
                    if let Some(m) = keep {
                        for i in 0..n * n {
                            dp[i] *= m[h * n * n + i];
                        }
                    }
                    // dS = P * (dP - rowsum(dP * P)), then fold in the scale
                    for i in 0..n {
                        let row = i * n..(i + 1) * n;
                        let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            dp[j] = p[j] * (dp[j] - dot) * scale;
                        }
                    }
                    gemm(n, n, dh, 1.0, View::rm(&dp, n), View::rm(kv, d).at(h * dh), 0.0, &mut dq, h * dh, d);
                    gemm(n, n, dh, 1.0, View::t(&dp, n), View::rm(qv, d).at(h * dh), 0.0, &mut dk, h * dh, d);
                }
                for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if self.ng(*id) {
                        let g = add_into(&mut grads[id.0], n * d);
                        g.iter_mut().zip(&buf).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = node.cols;
                let g = add_into(&mut grads[table.0], len(*table));
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        g[i * c + j] += gout[r * c + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let l = len(*p);
                    if self.ng(*p) {
                        let g = add_into(&mut grads[p.0], l);
                        g.iter_mut().zip(&gout[off..off + l]).for_each(|(x, y)| *x += y);
                    }
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut col = 0;
                for p in parts {
                    let pc = self.dims(*p).1;
                    if self.ng(*p) {
                        let g = add_into(&mut grads[p.0], node.rows * pc);
                        for i in 0..node.rows {
                            for j in 0..pc {
                                g[i * pc + j] += gout[i * c + col + j];
                            }
                        }
                    }
                    col += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.cols;
                let g = add_into(&mut grads[x.0], len(*x));
                g[start * c..start * c + gout.len()]
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(a, b)| *a += b);
            }
            Op::MeanRows { x, rows } => {
                let c = node.cols;
                let inv = 1.0 / rows.len() as f64;
                let g = add_into(&mut grads[x.0], len(*x));
                for &i in rows {
                    for j in 0..c {
                        g[i * c + j] += gout[j] * inv;
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let c = node.cols;
                let g = add_into(&mut grads[x.0], len(*x));
                for (j, &i) in argmax.iter().enumerate() {
                    g[i * c + j] += gout[j];
                }
            }
            Op::Im2Col { x, h, w } => {
                let c = self.dims(*x).1;
                let (h, w) = (*h, *w);
                let g = add_into(&mut grads[x.0], len(*x));
                for y in 0..h {
                    for xx in 0..w {
                        let o = (y * w + xx) * 9 * c;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let s = (sy as usize * w + sx as usize) * c;
                                let t = o + (ky * 3 + kx) * c;
                                for j in 0..c {
                                    g[s + j] += gout[t + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { x, h, w } => {
                let c = node.cols;
                let (h, w) = (*h, *w);
                let ty = upsample_taps(h);
                let tx = upsample_taps(w);
                let g = add_into(&mut grads[x.0], len(*x));
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let o = (oy * 2 * w + ox) * c;
                        let taps = [
                            (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
                            (y0 * w + x1, (1.0 - ly) * lx),
                            (y1 * w + x0, ly * (1.0 - lx)),
                            (y1 * w + x1, ly * lx),
                        ];
                        for (src, wt) in taps {
                            for j in 0..c {
                                g[src * c + j] += wt * gout[o + j];
                            }
                        }
                    }
                }
            }
            Op::Patchify { x, h, w, p } => {
                let c = self.dims(*x).1;
                let (h, w, p) = (*h, *w, *p);
                let gw = w / p;
                let g = add_into(&mut grads[x.0], len(*x));
                for y in 0..h {
                    for xx in 0..w {
                        let patch = (y / p) * gw + xx / p;
                        let col = ((y % p) * p + xx % p) * c;
                        let o = patch * p * p * c + col;
                        for j in 0..c {
                            g[(y * w + xx) * c + j] += gout[o + j];
                        }
                    }
                }
            }
            Op::BackProject { depth, dirs } => {
                let g = add_into(&mut grads[depth.0], dirs.len());
                for (i, a) in dirs.iter().enumerate() {
                    g[i] += gout[3 * i] * a[0] + gout[3 * i + 1] * a[1] + gout[3 * i + 2] * a[2];
                }
            }
            Op::Reshape(x) => {
                let g = add_into(&mut grads[x.0], len(*x));
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
            Op::Sum(x) => {
                let g = add_into(&mut grads[x.0], len(*x));
                g.iter_mut().for_each(|v| *v += gout[0]);
            }
            Op::Loss { inputs } => {
                for (id, local) in inputs {
                    if self.ng(*id) {
                        let g = add_into(&mut grads[id.0], local.len());
                        g.iter_mut().zip(local).for_each(|(x, y)| *x += y * gout[0]);
                    }
                }
            }
        }
    }
}

/// Patch flattening on plain values (see [`Graph::patchify`]).
pub fn patchify_values(xv: &[f64], h: usize, w: usize, c: usize, p: usize) -> Vec<f64> {
    let gw = w / p;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let patch = (y / p) * gw + xx / p;
            let col = ((y % p) * p + xx % p) * c;
            let o = patch * p * p * c + col;
            out[o..o + c].copy_from_slice(&xv[(y * w + xx) * c..(y * w + xx + 1) * c]);
        }
    }
    out
}

pub(crate) fn depth_adjoint_corrupted() -> bool {
    CORRUPT_DEPTH_ADJOINT.load(Ordering::Relaxed)
}
