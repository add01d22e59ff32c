//! Layers built from tape primitives: linear maps, two-layer GELU MLPs and
//! pre-norm transformer blocks. Parameters are addressed by dotted prefix.

use crate::error::{Error, Result};
use crate::tape::{Graph, NodeId};
use crate::tensor::{Init, ParamStore, Tensor};

pub fn init_linear(store: &mut ParamStore, init: &mut Init, prefix: &str, d_in: usize, d_out: usize) {
    store.insert(format!("{prefix}.w"), init.matrix(d_in, d_out));
    store.insert(format!("{prefix}.b"), init.zeros(d_out));
}

pub fn init_mlp(store: &mut ParamStore, init: &mut Init, prefix: &str, d_in: usize, hidden: usize, d_out: usize) {
    store.insert(format!("{prefix}.w1"), init.matrix(d_in, hidden));
    store.insert(format!("{prefix}.b1"), init.zeros(hidden));
    store.insert(format!("{prefix}.w2"), init.matrix(hidden, d_out));
    store.insert(format!("{prefix}.b2"), init.zeros(d_out));
}

pub fn init_layer_norm(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), init.ones(d));
    store.insert(format!("{prefix}.b"), init.zeros(d));
}

/// Pre-norm block: attention (`q`, `k`, `v`, `o` projections, no key bias) and a
/// `d -> 4d -> d` GELU MLP, each behind its own layer norm and residual.
pub fn init_block(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize) {
    init_layer_norm(store, init, &format!("{prefix}.ln1"), d);
    init_linear(store, init, &format!("{prefix}.attn.q"), d, d);
    // A key bias only shifts each softmax row by a constant.
    store.insert(format!("{prefix}.attn.k.w"), init.matrix(d, d));
    init_linear(store, init, &format!("{prefix}.attn.v"), d, d);
    init_linear(store, init, &format!("{prefix}.attn.o"), d, d);
    init_layer_norm(store, init, &format!("{prefix}.ln2"), d);
    init_mlp(store, init, &format!("{prefix}.mlp"), d, 4 * d, d);
}

fn check_in(g: &Graph, x: NodeId, w: NodeId, wname: &str) -> Result<()> {
    let (_, c) = g.dims(x);
    let (r, _) = g.dims(w);
    if c != r {
        return Err(Error::dim(wname, format!("expects input width {r}, got {c}")));
    }
    Ok(())
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let wname = format!("{prefix}.w");
    let w = g.param(store, &wname)?;
    check_in(g, x, w, &wname)?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `W2 * gelu(W1 * x + b1) + b2`, row-wise.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w1n = format!("{prefix}.w1");
    let w2n = format!("{prefix}.w2");
    let w1 = g.param(store, &w1n)?;
    check_in(g, x, w1, &w1n)?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &w2n)?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    if g.dims(w2).0 != g.dims(w1).1 {
        return Err(Error::dim(&w2n, format!("expects {} inputs, hidden is {}", g.dims(w2).0, g.dims(w1).1)));
    }
    if g.dims(b1) != (1, g.dims(w1).1) {
        return Err(Error::dim(format!("{prefix}.b1"), "bias width"));
    }
    if g.dims(b2) != (1, g.dims(w2).1) {
        return Err(Error::dim(format!("{prefix}.b2"), "bias width"));
    }
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let y = g.matmul(h, w2)?;
    g.add_row(y, b2)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn block(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId, heads: usize, causal: bool) -> Result<NodeId> {
    Ok(block_kv(g, store, prefix, x, heads, causal)?.0)
}

/// [`block`] that also returns its key and value projections.
pub fn block_kv(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    heads: usize,
    causal: bool,
) -> Result<(NodeId, NodeId, NodeId)> {
    let d = g.dims(x).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{prefix}: width {d} not divisible by {heads} heads")));
    }
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, store, &format!("{prefix}.attn.q"), h)?;
    let wk = g.param(store, &format!("{prefix}.attn.k.w"))?;
    let k = g.matmul(h, wk)?;
    let v = linear(g, store, &format!("{prefix}.attn.v"), h)?;
    let a = g.attention(q, k, v, heads, causal)?;
    let o = linear(g, store, &format!("{prefix}.attn.o"), a)?;
    let o = g.dropout(o)?;
    let x1 = g.add(x, o)?;
    let h2 = layer_norm(g, store, &format!("{prefix}.ln2"), x1)?;
    let m = mlp(g, store, &format!("{prefix}.mlp"), h2)?;
    let m = g.dropout(m)?;
    Ok((g.add(x1, m)?, k, v))
}

pub(crate) fn tensor_input(g: &mut Graph, x: &Tensor) -> Result<NodeId> {
    let (r, c) = x.dims2();
    g.input(r, c, x.data().to_vec())
}

/// Value-level MLP over the rows of `x` using parameters under `prefix`.
pub fn mlp_forward(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = tensor_input(&mut g, x)?;
    let y = mlp(&mut g, store, prefix, xi)?;
    Ok(g.to_tensor(y))
}

/// Value-level transformer block (no dropout).
pub fn attention_block_forward(x: &Tensor, store: &ParamStore, prefix: &str, heads: usize, causal: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = tensor_input(&mut g, x)?;
    let y = block(&mut g, store, prefix, xi, heads, causal)?;
    Ok(g.to_tensor(y))
}
