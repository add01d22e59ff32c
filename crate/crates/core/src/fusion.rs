//! Modality projections into the shared token space, sequence assembly,
//! the causal language model and answer decoding.
//!
//! Parameter names: `lm.*` (embedding table, positions, blocks, output
//! head) and `proj.*` (image patch embedding and heads, seg/pc heads and
//! their null tokens, the pooling head used for contrastive alignment).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::spatial::{PointCloudFeature, RegionFeatureSet, SpatialBlockConfig};
use crate::tape::{Graph, NodeId};
use crate::tensor::{Init, ParamStore, Tensor};
use crate::text::{BOS, EOS, RESERVED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_token: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    /// Filled from the dataset vocabulary when zero.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub image_patch: usize,
    pub pc_tokens: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_token: 64,
            lm_layers: 2,
            lm_heads: 4,
            vocab_size: 0,
            max_seq_len: 384,
            image_patch: 8,
            pc_tokens: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_token == 0 || self.lm_heads == 0 || self.d_token % self.lm_heads != 0 {
            return err("d_token must be a positive multiple of lm_heads");
        }
        if self.lm_layers == 0 {
            return err("lm_layers must be >= 1");
        }
        if self.vocab_size <= RESERVED.len() {
            return err("vocab_size must exceed the reserved block");
        }
        if self.image_patch == 0 || self.pc_tokens == 0 || self.max_seq_len == 0 {
            return err("image_patch, pc_tokens and max_seq_len must be >= 1");
        }
        Ok(())
    }
}

/// Which pseudo-modalities reach the language model, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoPc,
    NoSeg,
    NoDepth,
    NoDepthSeg,
    NoFusion,
    Stacked,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPc,
        Variant::NoSeg,
        Variant::NoDepth,
        Variant::NoDepthSeg,
        Variant::NoFusion,
        Variant::Stacked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPc => "no-pc",
            Variant::NoSeg => "no-seg",
            Variant::NoDepth => "no-depth",
            Variant::NoDepthSeg => "no-depth-seg",
            Variant::NoFusion => "no-fusion",
            Variant::Stacked => "stacked",
        }
    }

    /// Region tokens from the segmentation branch.
    pub fn seg_tokens(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPc | Variant::NoDepth)
    }

    /// Point-cloud tokens from back-projected predicted depth.
    pub fn pc_tokens(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSeg)
    }

    /// Predicted depth tokenized as an extra image.
    pub fn depth_image(self) -> bool {
        matches!(self, Variant::NoPc | Variant::Stacked)
    }

    /// Predicted segmentation (class colours) tokenized as an extra image.
    pub fn seg_image(self) -> bool {
        matches!(self, Variant::Stacked)
    }

    /// RGB, depth and one-hot segmentation stacked as input channels.
    pub fn early_fusion(self) -> bool {
        matches!(self, Variant::NoFusion)
    }

    pub fn needs_depth(self) -> bool {
        self.pc_tokens() || self.depth_image() || self.early_fusion()
    }

    pub fn needs_seg(self) -> bool {
        self.seg_tokens() || self.seg_image() || self.early_fusion()
    }

    pub fn image_channels(self, classes: usize) -> usize {
        if self.early_fusion() {
            3 + 1 + classes
        } else {
            3
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Image,
    Seg,
    Pc,
    Prompt,
    Answer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `len x d_token`.
    pub tokens: Tensor,
    pub tags: Vec<Tag>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn is_lm_param(name: &str) -> bool {
    name.starts_with("lm.")
}

/// Tensors fitted during spatial pretraining; they get the lower
/// fine-tuning rate.
pub fn is_pretrained_vision(name: &str) -> bool {
    ["vfm.enc.", "vfm.depth.", "vfm.seg."].iter().any(|p| name.starts_with(p))
}

pub fn init_lm(store: &mut ParamStore, init: &mut Init, cfg: &FusionConfig) {
    let d = cfg.d_token;
    store.insert("lm.embed", init.uniform(vec![cfg.vocab_size, d], 0.1));
    store.insert("lm.pos", init.uniform(vec![cfg.max_seq_len, d], 0.02));
    for l in 0..cfg.lm_layers {
        nn::init_block(store, init, &format!("lm.block{l}"), d);
    }
    nn::init_layer_norm(store, init, "lm.ln_f", d);
    nn::init_linear(store, init, "lm.head", d, cfg.vocab_size);
}

pub fn init_projections(
    store: &mut ParamStore,
    init: &mut Init,
    cfg: &FusionConfig,
    spatial: &SpatialBlockConfig,
    variant: Variant,
) {
    let d = cfg.d_token;
    let p = cfg.image_patch;
    let c = variant.image_channels(spatial.seg_classes);
    nn::init_linear(store, init, "proj.img.embed", c * p * p, d);
    nn::init_mlp(store, init, "proj.img.head", d, d, d);
    nn::init_mlp(store, init, "proj.seg", spatial.encoder_dim, d, d);
    store.insert("proj.seg.null", init.uniform(vec![1, d], 0.02));
    nn::init_mlp(store, init, "proj.pc", spatial.pc_dim, d, d * cfg.pc_tokens);
    store.insert("proj.pc.null", init.uniform(vec![cfg.pc_tokens, d], 0.02));
    nn::init_linear(store, init, "proj.pool", d, d);
}

/// Patch tokens for a channels-last `h x w x c` array.
pub fn image_tokens(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FusionConfig,
    pixels: &[f64],
    h: usize,
    w: usize,
    c: usize,
) -> Result<NodeId> {
    if h % cfg.image_patch != 0 || w % cfg.image_patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch {}",
            cfg.image_patch
        )));
    }
    let x = g.input(h * w, c, pixels.to_vec())?;
    let patches = g.patchify(x, h, w, cfg.image_patch)?;
    let e = nn::linear(g, store, "proj.img.embed", patches)?;
    nn::mlp(g, store, "proj.img.head", e)
}

/// One token per region; the learned null token when there are none.
pub fn seg_tokens(g: &mut Graph, store: &ParamStore, regions: &[NodeId]) -> Result<NodeId> {
    if regions.is_empty() {
        return g.param(store, "proj.seg.null");
    }
    let x = g.concat_rows(regions)?;
    nn::mlp(g, store, "proj.seg", x)
}

pub fn pc_tokens(g: &mut Graph, store: &ParamStore, cfg: &FusionConfig, feat: Option<NodeId>) -> Result<NodeId> {
    match feat {
        None => g.param(store, "proj.pc.null"),
        Some(f) => {
            let y = nn::mlp(g, store, "proj.pc", f)?;
            g.reshape(y, cfg.pc_tokens, cfg.d_token)
        }
    }
}

pub fn embed_ids(g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
    let table = g.param(store, "lm.embed")?;
    g.gather(table, ids)
}

/// Modality segments in sequence order; absent segments are skipped.
#[derive(Clone, Debug, Default)]
pub struct Segments {
    pub image: Vec<NodeId>,
    pub seg: Option<NodeId>,
    pub pc: Option<NodeId>,
}

pub fn assemble(
    g: &mut Graph,
    cfg: &FusionConfig,
    segs: &Segments,
    prompt: NodeId,
    answer: Option<NodeId>,
) -> Result<(NodeId, Vec<Tag>)> {
    let mut parts = Vec::new();
    let mut tags = Vec::new();
    let mut push = |id: NodeId, tag: Tag, g: &Graph| {
        parts.push(id);
        tags.extend(std::iter::repeat(tag).take(g.dims(id).0));
    };
    for &i in &segs.image {
        push(i, Tag::Image, g);
    }
    if let Some(s) = segs.seg {
        push(s, Tag::Seg, g);
    }
    if let Some(p) = segs.pc {
        push(p, Tag::Pc, g);
    }
    push(prompt, Tag::Prompt, g);
    if let Some(a) = answer {
        push(a, Tag::Answer, g);
    }
    if tags.len() > cfg.max_seq_len {
        return Err(Error::SequenceLength {
            len: tags.len(),
            max: cfg.max_seq_len,
        });
    }
    Ok((g.concat_rows(&parts)?, tags))
}

/// Final hidden states (after the closing layer norm), `n x d_token`.
pub fn lm_hidden(g: &mut Graph, store: &ParamStore, cfg: &FusionConfig, x: NodeId) -> Result<NodeId> {
    let n = g.dims(x).0;
    if n > cfg.max_seq_len {
        return Err(Error::SequenceLength {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    let pos_table = g.param(store, "lm.pos")?;
    let idx: Vec<usize> = (0..n).collect();
    let pos = g.gather(pos_table, &idx)?;
    let mut h = g.add(x, pos)?;
    for l in 0..cfg.lm_layers {
        h = nn::block(g, store, &format!("lm.block{l}"), h, cfg.lm_heads, true)?;
    }
    nn::layer_norm(g, store, "lm.ln_f", h)
}

pub fn lm_logits(g: &mut Graph, store: &ParamStore, hidden: NodeId) -> Result<NodeId> {
    nn::linear(g, store, "lm.head", hidden)
}

/// Input ids `[BOS, a..]` and next-token targets `[a.., EOS]` for an answer.
pub fn answer_segment(answer: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![BOS];
    input.extend_from_slice(answer);
    let mut targets = answer.to_vec();
    targets.push(EOS);
    (input, targets)
}

/// Mean negative log-likelihood of `targets` over the masked rows of
/// `logits` (`n x vocab`), with its gradient.
pub fn answer_nll(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = logits.len() / vocab.max(1);
    if vocab == 0 || logits.len() != n * vocab || targets.len() != n || mask.len() != n {
        return Err(Error::dim("answer_loss", "logits, targets and mask disagree in length"));
    }
    let t = mask.iter().filter(|&&m| m).count();
    if t == 0 {
        return Err(Error::EmptyDomain("answer mask selects no positions".into()));
    }
    let inv = 1.0 / t as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let y = targets[i];
        if y >= vocab {
            return Err(Error::Domain(format!("target id {y} outside vocabulary of {vocab}")));
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|z| (z - m).exp()).sum();
        let lse = m + s.ln();
        total += lse - row[y];
        let gr = &mut grad[i * vocab..(i + 1) * vocab];
        for (j, gj) in gr.iter_mut().enumerate() {
            *gj = (row[j] - lse).exp() * inv;
        }
        gr[y] -= inv;
    }
    Ok((total * inv, grad))
}

pub fn answer_loss(g: &mut Graph, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
    let vocab = g.dims(logits).1;
    let (value, grad) = answer_nll(g.value(logits), vocab, targets, mask)?;
    g.fused_loss(value, vec![(logits, grad)])
}

pub fn answer_loss_value(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (_, v) = logits.dims2();
    Ok(answer_nll(logits.data(), v, targets, mask)?.0)
}

fn input_of(g: &mut Graph, t: &Tensor) -> Result<NodeId> {
    nn::tensor_input(g, t)
}

/// RGB patch tokens, `(h/p * w/p) x d_token`.
pub fn project_image_tokens(image: &crate::image::RgbImage, params: &ParamStore, cfg: &FusionConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = image_tokens(&mut g, params, cfg, &image.data, image.height, image.width, 3)?;
    Ok(g.to_tensor(t))
}

pub fn project_seg_tokens(regions: &RegionFeatureSet, params: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = regions
        .regions
        .iter()
        .map(|(_, f)| g.input(1, f.len(), f.clone()))
        .collect::<Result<Vec<_>>>()?;
    let t = seg_tokens(&mut g, params, &nodes)?;
    Ok(g.to_tensor(t))
}

pub fn project_pc_tokens(feat: Option<&PointCloudFeature>, params: &ParamStore, cfg: &FusionConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = feat.map(|f| g.input(1, f.0.len(), f.0.clone())).transpose()?;
    let t = pc_tokens(&mut g, params, cfg, f)?;
    Ok(g.to_tensor(t))
}

/// Concatenates `[image, seg, pc, prompt]`, dropping the segments the
/// variant does not use. `image` holds every image-tagged token (including
/// depth or segmentation rendered as images for variants that do so).
pub fn build_input_sequence(
    image: &Tensor,
    seg: Option<&Tensor>,
    pc: Option<&Tensor>,
    prompt_ids: &[usize],
    params: &ParamStore,
    cfg: &FusionConfig,
    variant: Variant,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let segs = Segments {
        image: vec![input_of(&mut g, image)?],
        seg: match seg.filter(|_| variant.seg_tokens()) {
            Some(t) => Some(input_of(&mut g, t)?),
            None => None,
        },
        pc: match pc.filter(|_| variant.pc_tokens()) {
            Some(t) => Some(input_of(&mut g, t)?),
            None => None,
        },
    };
    let prompt = embed_ids(&mut g, params, prompt_ids)?;
    let (x, tags) = assemble(&mut g, cfg, &segs, prompt, None)?;
    Ok(TokenSequence {
        tokens: g.to_tensor(x),
        tags,
    })
}

/// Logits over the vocabulary at every position, `len x vocab`.
pub fn lm_forward(seq: &TokenSequence, params: &ParamStore, cfg: &FusionConfig) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(Error::dim("sequence", "empty"));
    }
    let mut g = Graph::new();
    let x = input_of(&mut g, &seq.tokens)?;
    let h = lm_hidden(&mut g, params, cfg, x)?;
    let l = lm_logits(&mut g, params, h)?;
    Ok(g.to_tensor(l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Per-layer keys and values of everything decoded so far.
#[derive(Clone)]
struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

fn attend_one(q: &[f64], k: &[f64], v: &[f64], d: usize, heads: usize) -> Vec<f64> {
    let n = k.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut s = vec![0.0; n];
    for h in 0..heads {
        let o = h * dh;
        for j in 0..n {
            s[j] = scale * (0..dh).map(|i| q[o + i] * k[j * d + o + i]).sum::<f64>();
        }
        crate::tape::softmax_rows(&mut s, n);
        for j in 0..n {
            for i in 0..dh {
                out[o + i] += s[j] * v[j * d + o + i];
            }
        }
    }
    out
}

fn last_row_logits(g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<Vec<f64>> {
    let n = g.dims(h).0;
    let last = g.slice_rows(h, n - 1, 1)?;
    let f = nn::layer_norm(g, store, "lm.ln_f", last)?;
    let l = lm_logits(g, store, f)?;
    Ok(g.value(l).to_vec())
}

fn prefill(store: &ParamStore, cfg: &FusionConfig, x: &Tensor) -> Result<(KvCache, Vec<f64>)> {
    let mut g = Graph::new();
    let n = x.dims2().0;
    if n > cfg.max_seq_len {
        return Err(Error::SequenceLength {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    let xi = input_of(&mut g, x)?;
    let pos_table = g.param(store, "lm.pos")?;
    let idx: Vec<usize> = (0..n).collect();
    let pos = g.gather(pos_table, &idx)?;
    let mut h = g.add(xi, pos)?;
    let mut cache = KvCache {
        k: Vec::new(),
        v: Vec::new(),
        len: n,
    };
    for l in 0..cfg.lm_layers {
        let (out, k, v) = nn::block_kv(&mut g, store, &format!("lm.block{l}"), h, cfg.lm_heads, true)?;
        cache.k.push(g.value(k).to_vec());
        cache.v.push(g.value(v).to_vec());
        h = out;
    }
    let logits = last_row_logits(&mut g, store, h)?;
    Ok((cache, logits))
}

fn step(store: &ParamStore, cfg: &FusionConfig, cache: &mut KvCache, token: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let d = cfg.d_token;
    let e = embed_ids(&mut g, store, &[token])?;
    let pos_table = g.param(store, "lm.pos")?;
    let pos = g.gather(pos_table, &[cache.len])?;
    let mut x = g.add(e, pos)?;
    for l in 0..cfg.lm_layers {
        let p = format!("lm.block{l}");
        let h = nn::layer_norm(&mut g, store, &format!("{p}.ln1"), x)?;
        let q = nn::linear(&mut g, store, &format!("{p}.attn.q"), h)?;
        let wk = g.param(store, &format!("{p}.attn.k.w"))?;
        let k = g.matmul(h, wk)?;
        let v = nn::linear(&mut g, store, &format!("{p}.attn.v"), h)?;
        cache.k[l].extend_from_slice(g.value(k));
        cache.v[l].extend_from_slice(g.value(v));
        let a = attend_one(g.value(q), &cache.k[l], &cache.v[l], d, cfg.lm_heads);
        let a = g.input(1, d, a)?;
        let o = nn::linear(&mut g, store, &format!("{p}.attn.o"), a)?;
        let x1 = g.add(x, o)?;
        let h2 = nn::layer_norm(&mut g, store, &format!("{p}.ln2"), x1)?;
        let m = nn::mlp(&mut g, store, &format!("{p}.mlp"), h2)?;
        x = g.add(x1, m)?;
    }
    cache.len += 1;
    last_row_logits(&mut g, store, x)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Beam {
    ids: Vec<usize>,
    score: f64,
    done: bool,
    cache: KvCache,
    logits: Vec<f64>,
}

/// Appends BOS to `prefix` and decodes up to `max_new` tokens. EOS ends the
/// answer and is not returned. Beams are ranked by summed log-probability,
/// ties going to the lexicographically smaller id sequence. Decoding also
/// stops when the sequence reaches `max_seq_len`.
pub fn decode_answer(
    prefix: &TokenSequence,
    params: &ParamStore,
    cfg: &FusionConfig,
    mode: DecodeMode,
    max_new: usize,
) -> Result<Vec<usize>> {
    let width = match mode {
        DecodeMode::Greedy => 1,
        DecodeMode::Beam(0) => return Err(Error::Config("beam width must be >= 1".into())),
        DecodeMode::Beam(k) => k,
    };
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let bos = embed_ids(&mut g, params, &[BOS])?;
    let mut rows = prefix.tokens.data().to_vec();
    rows.extend_from_slice(g.value(bos));
    let x = Tensor::matrix(prefix.len() + 1, cfg.d_token, rows)?;
    let (cache, logits) = prefill(params, cfg, &x)?;

    if let DecodeMode::Greedy = mode {
        let mut cache = cache;
        let mut logits = logits;
        let mut out = Vec::new();
        for i in 0..max_new {
            let tok = argmax(&logits);
            if tok == EOS {
                break;
            }
            out.push(tok);
            if i + 1 == max_new || cache.len >= cfg.max_seq_len {
                break;
            }
            logits = step(params, cfg, &mut cache, tok)?;
        }
        return Ok(out);
    }

    let mut beams = vec![Beam {
        ids: Vec::new(),
        score: 0.0,
        done: false,
        cache,
        logits,
    }];
    for i in 0..max_new {
        if beams.iter().all(|b| b.done) {
            break;
        }
        // (score, ids, parent, token)
        let mut cands: Vec<(f64, Vec<usize>, usize, Option<usize>)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.done {
                cands.push((b.score, b.ids.clone(), bi, None));
                continue;
            }
            for (tok, lp) in log_softmax(&b.logits).into_iter().enumerate() {
                let mut ids = b.ids.clone();
                if tok != EOS {
                    ids.push(tok);
                }
                cands.push((b.score + lp, ids, bi, Some(tok)));
            }
        }
        cands.sort_by(|a, b| match b.0.total_cmp(&a.0) {
            Ordering::Equal => a.1.cmp(&b.1),
            o => o,
        });
        cands.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (score, ids, parent, tok) in cands {
            let p = &beams[parent];
            let last = i + 1 == max_new;
            match tok {
                None => next.push(Beam {
                    ids,
                    score,
                    done: true,
                    cache: p.cache.clone(),
                    logits: Vec::new(),
                }),
                Some(EOS) => next.push(Beam {
                    ids,
                    score,
                    done: true,
                    cache: p.cache.clone(),
                    logits: Vec::new(),
                }),
                Some(t) => {
                    let mut cache = p.cache.clone();
                    let full = last || cache.len >= cfg.max_seq_len;
                    let logits = if full {
                        Vec::new()
                    } else {
                        step(params, cfg, &mut cache, t)?
                    };
                    next.push(Beam {
                        ids,
                        score,
                        done: full,
                        cache,
                        logits,
                    });
                }
            }
        }
        beams = next;
    }
    Ok(beams.swap_remove(0).ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> FusionConfig {
        FusionConfig {
            d_token: 16,
            lm_layers: 2,
            lm_heads: 2,
            vocab_size: 20,
            max_seq_len: 48,
            image_patch: 8,
            pc_tokens: 1,
        }
    }

    fn spatial() -> SpatialBlockConfig {
        SpatialBlockConfig {
            encoder_dim: 16,
            pc_dim: 8,
            ..Default::default()
        }
    }

    fn params(seed: u64, variant: Variant) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let mut init = Init { rng: &mut rng };
        init_lm(&mut s, &mut init, &cfg());
        init_projections(&mut s, &mut init, &cfg(), &spatial(), variant);
        s
    }

    fn rand_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    fn rand_tensor(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn image_tokens_count_and_locality() {
        let p = params(1, Variant::Full);
        let img = rand_image(2);
        let a = project_image_tokens(&img, &p, &cfg()).unwrap();
        assert_eq!(a.shape(), &[16, 16]);
        let mut img2 = img.clone();
        img2.set_pixel(9, 17, [0.0, 1.0, 0.5]); // patch (row 2, col 1)
        let b = project_image_tokens(&img2, &p, &cfg()).unwrap();
        for t in 0..16 {
            assert_eq!(a.row(t) == b.row(t), t != 9, "token {t}");
        }
        let bad = FusionConfig {
            image_patch: 5,
            ..cfg()
        };
        assert!(matches!(project_image_tokens(&img, &p, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_zero_bias_gives_equal_tokens() {
        let mut p = params(1, Variant::Full);
        for (name, t) in p.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let t = project_image_tokens(&RgbImage::zeros(32, 32), &p, &cfg()).unwrap();
        for r in 1..16 {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn seg_and_pc_tokens() {
        let p = params(3, Variant::Full);
        let f = vec![0.3; 16];
        let regions = RegionFeatureSet {
            regions: vec![(1, f.clone()), (2, vec![0.1; 16]), (5, f.clone())],
        };
        let t = project_seg_tokens(&regions, &p).unwrap();
        assert_eq!(t.dims2(), (3, 16));
        assert_eq!(t.row(0), t.row(2));
        let null = project_seg_tokens(&RegionFeatureSet::default(), &p).unwrap();
        assert_eq!(null.data(), p.get("proj.seg.null").unwrap().data());

        let pc = PointCloudFeature(vec![0.5; 8]);
        let a = project_pc_tokens(Some(&pc), &p, &cfg()).unwrap();
        assert_eq!(a.dims2(), (1, 16));
        assert_eq!(a, project_pc_tokens(Some(&pc), &p, &cfg()).unwrap());
        let pn = project_pc_tokens(None, &p, &cfg()).unwrap();
        assert_eq!(pn.data(), p.get("proj.pc.null").unwrap().data());
        assert_ne!(pn.data(), null.data());
    }

    #[test]
    fn sequence_lengths_per_variant() {
        let p = params(4, Variant::Full);
        let img = rand_tensor(16, 16, 1);
        let seg = rand_tensor(3, 16, 2);
        let pc = rand_tensor(1, 16, 3);
        let prompt: Vec<usize> = (4..12).collect();
        let s = build_input_sequence(&img, Some(&seg), Some(&pc), &prompt, &p, &cfg(), Variant::Full).unwrap();
        assert_eq!(s.len(), 28);
        let want: Vec<Tag> = [vec![Tag::Image; 16], vec![Tag::Seg; 3], vec![Tag::Pc], vec![Tag::Prompt; 8]].concat();
        assert_eq!(s.tags, want);
        let ns = build_input_sequence(&img, Some(&seg), Some(&pc), &prompt, &p, &cfg(), Variant::NoSeg).unwrap();
        assert_eq!(ns.len(), 25);
        assert!(!ns.tags.contains(&Tag::Seg));
        assert_eq!(ns.tokens.row(16), s.tokens.row(19));
        assert!(matches!(
            build_input_sequence(&img, None, None, &[99], &p, &cfg(), Variant::Full),
            Err(Error::Domain(_))
        ));
        let long: Vec<usize> = vec![5; 40];
        assert!(matches!(
            build_input_sequence(&img, None, None, &long, &p, &cfg(), Variant::Full),
            Err(Error::SequenceLength { len: 56, max: 48 })
        ));
    }

    fn seq(n: usize, seed: u64) -> TokenSequence {
        TokenSequence {
            tokens: rand_tensor(n, 16, seed),
            tags: vec![Tag::Prompt; n],
        }
    }

    #[test]
    fn lm_forward_shape_causality_and_softmax() {
        let p = params(5, Variant::Full);
        let s = seq(10, 1);
        let l = lm_forward(&s, &p, &cfg()).unwrap();
        assert_eq!(l.shape(), &[10, 20]);
        let mut s2 = s.clone();
        for j in 16 * 6..16 * 7 {
            s2.tokens.data_mut()[j] += 0.7;
        }
        let l2 = lm_forward(&s2, &p, &cfg()).unwrap();
        assert_eq!(&l.data()[..6 * 20], &l2.data()[..6 * 20]);
        assert_ne!(&l.data()[6 * 20..7 * 20], &l2.data()[6 * 20..7 * 20]);
        for r in 0..10 {
            let mut row = l.row(r).to_vec();
            crate::tape::softmax_rows(&mut row, 20);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let p = params(6, Variant::Full);
        let s = seq(5, 2);
        let ids = decode_answer(&s, &p, &cfg(), DecodeMode::Greedy, 12).unwrap();
        // Replay: full forward over prefix + BOS + decoded tokens must pick
        // the same argmax at every step.
        let mut g = Graph::new();
        let mut all = vec![BOS];
        all.extend(&ids);
        let e = embed_ids(&mut g, &p, &all).unwrap();
        let mut rows = s.tokens.data().to_vec();
        rows.extend_from_slice(g.value(e));
        let full = TokenSequence {
            tokens: Tensor::matrix(5 + all.len(), 16, rows).unwrap(),
            tags: vec![Tag::Prompt; 5 + all.len()],
        };
        let l = lm_forward(&full, &p, &cfg()).unwrap();
        for (i, &t) in ids.iter().enumerate() {
            assert_eq!(argmax(l.row(5 + i)), t);
        }
        if ids.len() < 12 {
            assert_eq!(argmax(l.row(5 + ids.len())), EOS);
        }
        // Incremental logits agree with the full pass to round-off.
        let (mut cache, first) = prefill(&p, &cfg(), &Tensor::matrix(6, 16, full.tokens.data()[..96].to_vec()).unwrap()).unwrap();
        for (a, b) in first.iter().zip(l.row(5)) {
            assert!((a - b).abs() < 1e-12);
        }
        if let Some(&t0) = ids.first() {
            let next = step(&p, &cfg(), &mut cache, t0).unwrap();
            for (a, b) in next.iter().zip(l.row(6)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beam_one_equals_greedy_and_is_deterministic() {
        for seed in 0..4 {
            let p = params(10 + seed, Variant::Full);
            let s = seq(4, seed);
            let g1 = decode_answer(&s, &p, &cfg(), DecodeMode::Greedy, 10).unwrap();
            let b1 = decode_answer(&s, &p, &cfg(), DecodeMode::Beam(1), 10).unwrap();
            assert_eq!(g1, b1);
            assert_eq!(g1, decode_answer(&s, &p, &cfg(), DecodeMode::Greedy, 10).unwrap());
            let b3 = decode_answer(&s, &p, &cfg(), DecodeMode::Beam(3), 10).unwrap();
            assert_eq!(b3, decode_answer(&s, &p, &cfg(), DecodeMode::Beam(3), 10).unwrap());
        }
        let p = params(1, Variant::Full);
        assert!(decode_answer(&seq(3, 1), &p, &cfg(), DecodeMode::Greedy, 0).unwrap().is_empty());
        assert!(decode_answer(&seq(3, 1), &p, &cfg(), DecodeMode::Beam(0), 3).is_err());
    }

    #[test]
    fn eos_first_gives_empty_answer() {
        let mut p = params(2, Variant::Full);
        let b = p.get_mut("lm.head.b").unwrap();
        b.data_mut()[EOS] = 100.0;
        assert!(decode_answer(&seq(3, 1), &p, &cfg(), DecodeMode::Greedy, 5).unwrap().is_empty());
        assert!(decode_answer(&seq(3, 1), &p, &cfg(), DecodeMode::Beam(2), 5).unwrap().is_empty());
    }

    /// Scratch per-position NLL.
    fn nll_oracle(logits: &Tensor, targets: &[usize], mask: &[bool]) -> f64 {
        let (n, v) = logits.dims2();
        let mut s = 0.0;
        let mut t = 0.0;
        for i in 0..n {
            if mask[i] {
                let z: f64 = (0..v).map(|j| logits.at2(i, j).exp()).sum();
                s -= (logits.at2(i, targets[i]).exp() / z).ln();
                t += 1.0;
            }
        }
        s / t
    }

    #[test]
    fn answer_loss_identities() {
        let uniform = Tensor::zeros(vec![6, 50]);
        let targets = vec![3, 7, 9, 1, 0, 49];
        let mask = vec![false, true, true, true, false, true];
        let v = answer_loss_value(&uniform, &targets, &mask).unwrap();
        assert!((v - 50f64.ln()).abs() <= 1e-9);
        assert!((50f64.ln() - 3.912).abs() < 1e-3);

        let mut sharp = Tensor::filled(vec![6, 50], -800.0);
        for (i, &t) in targets.iter().enumerate() {
            sharp.data_mut()[i * 50 + t] = 800.0;
        }
        assert_eq!(answer_loss_value(&sharp, &targets, &mask).unwrap(), 0.0);
        assert!(matches!(
            answer_loss_value(&uniform, &targets, &[false; 6]),
            Err(Error::EmptyDomain(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let l = rand_tensor(7, 9, rng.gen());
            let t: Vec<usize> = (0..7).map(|_| rng.gen_range(0..9)).collect();
            let m: Vec<bool> = (0..7).map(|i| i == 0 || rng.gen()).collect();
            let got = answer_loss_value(&l, &t, &m).unwrap();
            assert!((got - nll_oracle(&l, &t, &m)).abs() < 1e-12);
        }
    }

    #[test]
    fn answer_loss_gradients_match_finite_differences() {
        let mut p = params(8, Variant::Full);
        p.set_trainable(is_lm_param);
        let prompt = vec![4usize, 5, 6, 7];
        let (ans_in, targets) = answer_segment(&[8, 9, 10]);
        let f = |s: &ParamStore, g: &mut Graph| {
            let mut ids = prompt.clone();
            ids.extend(&ans_in);
            let x = embed_ids(g, s, &ids)?;
            let h = lm_hidden(g, s, &cfg(), x)?;
            let l = lm_logits(g, s, h)?;
            let mut t = vec![0; prompt.len()];
            t.extend(&targets);
            let m: Vec<bool> = (0..ids.len()).map(|i| i >= prompt.len()).collect();
            answer_loss(g, l, &t, &m)
        };
        let r = crate::gradcheck::finite_diff_grad_check(f, &p, 1e-5, 1e-4, 1).unwrap();
        assert!(r.passed(), "{:?}", r.worst());
        assert!(r.tensors.iter().all(|t| t.name.starts_with("lm.")));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!(Variant::NoFusion.image_channels(8), 12);
        assert!(!Variant::NoDepthSeg.needs_depth() && !Variant::NoDepthSeg.needs_seg());
    }
}
