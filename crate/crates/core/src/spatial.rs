//! The spatial block: a shared transformer encoder feeding a depth decoder
//! and a segmentation decoder, masked region pooling over the predicted
//! panoptic map, and a permutation-invariant point-cloud encoder.
//!
//! Grids are stored pixel-major as `(h*w) x channels` matrices. Parameter
//! names: `vfm.enc.*` (shared encoder), `vfm.depth.*`, `vfm.seg.*`,
//! `vfm.region.*` (the region MLP) and `pcenc.*`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, PointCloud};
use crate::image::RgbImage;
use crate::nn;
use crate::tape::{softmax_rows, Graph, NodeId};
use crate::tensor::{Init, ParamStore, Tensor};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialBlockConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub encoder_blocks: usize,
    pub encoder_dim: usize,
    pub encoder_heads: usize,
    pub depth_decoder_stages: usize,
    pub seg_classes: usize,
    pub seg_hidden: usize,
    pub pc_hidden: usize,
    pub pc_dim: usize,
    pub lambda_l1: f64,
    pub lambda_grad: f64,
    pub lambda_dice: f64,
}

impl Default for SpatialBlockConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            encoder_blocks: 2,
            encoder_dim: 64,
            encoder_heads: 4,
            depth_decoder_stages: 2,
            seg_classes: 8,
            seg_hidden: 32,
            pc_hidden: 64,
            pc_dim: 64,
            lambda_l1: 1.0,
            lambda_grad: 0.5,
            lambda_dice: 1.0,
        }
    }
}

impl SpatialBlockConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.seg_classes < 2 {
            return err(format!("seg_classes must be >= 2, got {}", self.seg_classes));
        }
        if self.encoder_blocks == 0 || self.depth_decoder_stages == 0 || self.encoder_dim == 0 {
            return err("encoder_blocks, encoder_dim and depth_decoder_stages must be >= 1".into());
        }
        if self.lambda_l1 < 0.0 || self.lambda_grad < 0.0 || self.lambda_dice < 0.0 {
            return err("loss weights must be non-negative".into());
        }
        let p = self.patch();
        if self.image_height % p != 0 || self.image_width % p != 0 {
            return err(format!(
                "image {}x{} not divisible by encoder patch {p}",
                self.image_height, self.image_width
            ));
        }
        if self.encoder_heads == 0 || self.encoder_dim % self.encoder_heads != 0 {
            return err("encoder_dim must be divisible by encoder_heads".into());
        }
        Ok(())
    }

    /// Encoder patch side: each decoder stage doubles resolution.
    pub fn patch(&self) -> usize {
        1 << self.depth_decoder_stages
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch(), self.image_width / self.patch())
    }

    fn stage_channels(&self, i: usize) -> usize {
        (self.encoder_dim >> (i + 1)).max(8)
    }
}

/// Per-pixel class ids in `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl PanopticMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>, classes: usize) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::dim("panoptic map", "pixel count"));
        }
        if let Some(bad) = ids.iter().find(|&&k| k == 0 || k as usize > classes) {
            return Err(Error::Domain(format!("class id {bad} outside [1, {classes}]")));
        }
        Ok(Self { height, width, ids })
    }

    pub fn at(&self, u: usize, v: usize) -> u8 {
        self.ids[v * self.width + u]
    }

    /// Nearest-neighbour downsampling by `factor`, sampling the pixel at
    /// offset `factor / 2` inside each cell.
    pub fn downsample(&self, factor: usize) -> Vec<u8> {
        let (gh, gw) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                out.push(self.at(gx * factor + factor / 2, gy * factor + factor / 2));
            }
        }
        out
    }

    pub fn classes_present(&self) -> Vec<u8> {
        let mut c: Vec<u8> = self.ids.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Pooled features per present class, ascending by class id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionFeatureSet {
    pub regions: Vec<(u8, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFeature(pub Vec<f64>);

pub fn init_params(store: &mut ParamStore, init: &mut Init, cfg: &SpatialBlockConfig) {
    let c = cfg.encoder_dim;
    let p = cfg.patch();
    let (gh, gw) = cfg.grid();
    nn::init_linear(store, init, "vfm.enc.patch", 3 * p * p, c);
    store.insert("vfm.enc.pos", init.uniform(vec![gh * gw, c], 0.02));
    for b in 0..cfg.encoder_blocks {
        nn::init_block(store, init, &format!("vfm.enc.block{b}"), c);
    }
    nn::init_layer_norm(store, init, "vfm.enc.ln_f", c);
    let mut prev = c;
    for i in 0..cfg.depth_decoder_stages {
        let ci = cfg.stage_channels(i);
        nn::init_linear(store, init, &format!("vfm.depth.conv{i}"), 9 * prev, ci);
        nn::init_linear(store, init, &format!("vfm.depth.skip{i}"), 3, ci);
        prev = ci;
    }
    nn::init_linear(store, init, "vfm.depth.head", prev, 1);
    // Start near a typical viewing distance so early training is stable.
    store.get_mut("vfm.depth.head.b").unwrap().data_mut()[0] = 4.0;
    nn::init_mlp(store, init, "vfm.seg.mlp", c + 3, cfg.seg_hidden, cfg.seg_classes);
    nn::init_mlp(store, init, "vfm.region.phi", c, c, c);
    nn::init_mlp(store, init, "pcenc.mlp", 3, cfg.pc_hidden, cfg.pc_dim);
}

fn check_image(image: &RgbImage, cfg: &SpatialBlockConfig) -> Result<()> {
    if image.height != cfg.image_height || image.width != cfg.image_width {
        return Err(Error::dim(
            "image",
            format!(
                "expected {}x{}, got {}x{}",
                cfg.image_height, cfg.image_width, image.height, image.width
            ),
        ));
    }
    Ok(())
}

/// Shared encoder: patch embedding, learned positions, transformer blocks.
/// Returns `(h'*w') x C`.
pub fn encode(g: &mut Graph, store: &ParamStore, cfg: &SpatialBlockConfig, image: &RgbImage) -> Result<NodeId> {
    check_image(image, cfg)?;
    let p = cfg.patch();
    let px = g.input(image.height * image.width, 3, image.data.clone())?;
    let patches = g.patchify(px, image.height, image.width, p)?;
    let x = nn::linear(g, store, "vfm.enc.patch", patches)?;
    let pos = g.param(store, "vfm.enc.pos")?;
    let mut x = g.add(x, pos)?;
    for b in 0..cfg.encoder_blocks {
        x = nn::block(g, store, &format!("vfm.enc.block{b}"), x, cfg.encoder_heads, false)?;
    }
    nn::layer_norm(g, store, "vfm.enc.ln_f", x)
}

/// Upsampling decoder with image skips; softplus output, `(h*w) x 1`.
pub fn decode_depth(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &SpatialBlockConfig,
    enc: NodeId,
    image: &RgbImage,
) -> Result<NodeId> {
    let (mut gh, mut gw) = cfg.grid();
    let mut x = enc;
    for i in 0..cfg.depth_decoder_stages {
        let up = g.upsample2x(x, gh, gw)?;
        gh *= 2;
        gw *= 2;
        let cols = g.im2col3x3(up, gh, gw)?;
        let conv = nn::linear(g, store, &format!("vfm.depth.conv{i}"), cols)?;
        let factor = image.height / gh;
        let pooled = g.input(gh * gw, 3, image.avg_pool(factor))?;
        let skip = nn::linear(g, store, &format!("vfm.depth.skip{i}"), pooled)?;
        let sum = g.add(conv, skip)?;
        x = g.gelu(sum);
    }
    let d = nn::linear(g, store, "vfm.depth.head", x)?;
    Ok(g.softplus(d))
}

/// Segmentation logits `(h*w) x K`: encoder features upsampled to full
/// resolution, concatenated with the pixel colour, per-pixel MLP.
pub fn decode_seg(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &SpatialBlockConfig,
    enc: NodeId,
    image: &RgbImage,
) -> Result<NodeId> {
    let (mut gh, mut gw) = cfg.grid();
    let mut x = enc;
    for _ in 0..cfg.depth_decoder_stages {
        x = g.upsample2x(x, gh, gw)?;
        gh *= 2;
        gw *= 2;
    }
    let px = g.input(image.height * image.width, 3, image.data.clone())?;
    let feat = g.concat_cols(&[x, px])?;
    nn::mlp(g, store, "vfm.seg.mlp", feat)
}

/// Per-pixel argmax over `K` logits (rows of `logits`); ties go to the
/// smaller class id.
pub fn argmax_map(logits: &[f64], height: usize, width: usize, classes: usize) -> PanopticMap {
    let ids = logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for k in 1..classes {
                if row[k] > row[best] {
                    best = k;
                }
            }
            (best + 1) as u8
        })
        .collect();
    PanopticMap { height, width, ids }
}

pub struct SpatialNodes {
    pub enc: NodeId,
    pub depth: Option<NodeId>,
    pub seg_logits: Option<NodeId>,
    pub seg_map: Option<PanopticMap>,
}

/// Runs the shared encoder once and whichever decoders are requested.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &SpatialBlockConfig,
    image: &RgbImage,
    with_depth: bool,
    with_seg: bool,
) -> Result<SpatialNodes> {
    let enc = encode(g, store, cfg, image)?;
    let depth = if with_depth {
        Some(decode_depth(g, store, cfg, enc, image)?)
    } else {
        None
    };
    let (seg_logits, seg_map) = if with_seg {
        let l = decode_seg(g, store, cfg, enc, image)?;
        let map = argmax_map(g.value(l), image.height, image.width, cfg.seg_classes);
        (Some(l), Some(map))
    } else {
        (None, None)
    };
    Ok(SpatialNodes {
        enc,
        depth,
        seg_logits,
        seg_map,
    })
}

/// Masked mean of encoder cells per class (map downsampled to the encoder
/// grid), passed through the region MLP. Classes that vanish after
/// downsampling are skipped.
pub fn region_pool_nodes(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &SpatialBlockConfig,
    map: &PanopticMap,
    enc: NodeId,
) -> Result<Vec<(u8, NodeId)>> {
    let factor = map.height / cfg.grid().0;
    let cells = map.downsample(factor);
    if g.dims(enc).0 != cells.len() {
        return Err(Error::dim("encoder features", format!("{} cells for {} map cells", g.dims(enc).0, cells.len())));
    }
    let mut classes: Vec<u8> = cells.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::with_capacity(classes.len());
    for k in classes {
        let rows: Vec<usize> = cells.iter().enumerate().filter(|(_, &c)| c == k).map(|(i, _)| i).collect();
        let pooled = g.mean_rows(enc, &rows)?;
        out.push((k, nn::mlp(g, store, "vfm.region.phi", pooled)?));
    }
    Ok(out)
}

/// Shared per-point MLP followed by a coordinate-wise max over points.
pub fn encode_point_cloud_node(g: &mut Graph, store: &ParamStore, points: NodeId) -> Result<NodeId> {
    let per_point = nn::mlp(g, store, "pcenc.mlp", points)?;
    Ok(g.max_rows(per_point))
}

/// Back-projects a predicted `(h*w) x 1` depth node to world points.
pub fn back_project_node(
    g: &mut Graph,
    depth: NodeId,
    height: usize,
    width: usize,
    k: &CameraIntrinsics,
    t: &CameraPose,
) -> Result<NodeId> {
    let rays = crate::geometry::pixel_rays(height, width, k, t);
    g.back_project(depth, rays, t.translation)
}

fn depth_terms(pred: &[f64], gt: &DepthMap, cfg: &SpatialBlockConfig) -> Result<(f64, Vec<f64>)> {
    let (h, w) = (gt.height, gt.width);
    if pred.len() != h * w {
        return Err(Error::dim("depth prediction", format!("{} values for {h}x{w} target", pred.len())));
    }
    let n_valid = gt.valid_count();
    if n_valid == 0 {
        return Err(Error::EmptyDomain("ground-truth depth has no valid pixels".into()));
    }
    let inv = 1.0 / n_valid as f64;
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut grad = vec![0.0; h * w];
    let mut l1 = 0.0;
    for i in 0..h * w {
        if gt.values[i] > 0.0 {
            let r = pred[i] - gt.values[i];
            l1 += r.abs();
            grad[i] += cfg.lambda_l1 * sign(r) * inv;
        }
    }
    let mut gsum = 0.0;
    let mut pair = |a: usize, b: usize, grad: &mut Vec<f64>| {
        if gt.values[a] > 0.0 && gt.values[b] > 0.0 {
            let r = (pred[b] - pred[a]) - (gt.values[b] - gt.values[a]);
            gsum += r.abs();
            let s = cfg.lambda_grad * sign(r) * inv;
            grad[b] += s;
            grad[a] -= s;
        }
    };
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if u + 1 < w {
                pair(i, i + 1, &mut grad);
            }
            if v + 1 < h {
                pair(i, i + w, &mut grad);
            }
        }
    }
    let value = cfg.lambda_l1 * l1 * inv + cfg.lambda_grad * gsum * inv;
    Ok((value, grad))
}

/// `λ_l1·mean|D − D*| + λ_grad·(Σ|∂_u D − ∂_u D*| + Σ|∂_v D − ∂_v D*|) / N`
/// over the valid pixels of `gt` (forward differences; a pair counts only
/// when both pixels are valid).
pub fn depth_loss(g: &mut Graph, pred: NodeId, gt: &DepthMap, cfg: &SpatialBlockConfig) -> Result<NodeId> {
    let (value, mut grad) = depth_terms(g.value(pred), gt, cfg)?;
    if crate::tape::depth_adjoint_corrupted() {
        grad.iter_mut().for_each(|x| *x *= 1.01);
    }
    g.fused_loss(value, vec![(pred, grad)])
}

pub fn depth_loss_value(pred: &DepthMap, gt: &DepthMap, cfg: &SpatialBlockConfig) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim("depth prediction", "shape differs from target"));
    }
    Ok(depth_terms(&pred.values, gt, cfg)?.0)
}

fn seg_terms(logits: &[f64], gt: &PanopticMap, cfg: &SpatialBlockConfig) -> Result<(f64, Vec<f64>)> {
    let k = cfg.seg_classes;
    let n = gt.height * gt.width;
    if logits.len() != n * k {
        return Err(Error::dim("seg logits", format!("{} values for {n} pixels x {k} classes", logits.len())));
    }
    if let Some(bad) = gt.ids.iter().find(|&&c| c == 0 || c as usize > k) {
        return Err(Error::Domain(format!("target class id {bad} outside [1, {k}]")));
    }
    let mut p = logits.to_vec();
    softmax_rows(&mut p, k);
    let nf = n as f64;
    let mut ce = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for i in 0..n {
        let y = gt.ids[i] as usize - 1;
        // log-softmax computed from logits directly for accuracy.
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        ce += lse - row[y];
        inter[y] += p[i * k + y];
        gsum[y] += 1.0;
        for c in 0..k {
            psum[c] += p[i * k + c];
        }
    }
    let mut dice_loss = 0.0;
    // d(1 - Dice_c)/dp_ic
    let mut dpi = vec![0.0; k]; // coefficient on y_ic
    let mut dp0 = vec![0.0; k]; // coefficient independent of y
    for c in 0..k {
        let den = psum[c] + gsum[c] + DICE_EPS;
        let num = 2.0 * inter[c] + DICE_EPS;
        dice_loss += 1.0 - num / den;
        dpi[c] = -2.0 / den;
        dp0[c] = num / (den * den);
    }
    let value = ce / nf + cfg.lambda_dice * dice_loss;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        let y = gt.ids[i] as usize - 1;
        let pr = &p[i * k..(i + 1) * k];
        // upstream gradient on probabilities from the Dice term
        let mut gp = [0.0f64; 256];
        let gp = &mut gp[..k];
        for c in 0..k {
            gp[c] = cfg.lambda_dice * (dp0[c] + if c == y { dpi[c] } else { 0.0 });
        }
        let dot: f64 = (0..k).map(|c| pr[c] * gp[c]).sum();
        for c in 0..k {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad[i * k + c] = (pr[c] - onehot) / nf + pr[c] * (gp[c] - dot);
        }
    }
    Ok((value, grad))
}

/// Mean per-pixel cross-entropy plus `λ_Dice · Σ_k (1 − Dice_k)` with
/// soft Dice over all pixels (`ε = 1e-6`).
pub fn seg_loss(g: &mut Graph, logits: NodeId, gt: &PanopticMap, cfg: &SpatialBlockConfig) -> Result<NodeId> {
    let (value, grad) = seg_terms(g.value(logits), gt, cfg)?;
    g.fused_loss(value, vec![(logits, grad)])
}

/// Value-level segmentation loss for logits shaped `[K, H, W]`.
pub fn seg_loss_value(logits: &Tensor, gt: &PanopticMap, cfg: &SpatialBlockConfig) -> Result<f64> {
    Ok(seg_terms(&chw_to_pixel_major(logits)?, gt, cfg)?.0)
}

fn chw_to_pixel_major(t: &Tensor) -> Result<Vec<f64>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::dim("seg logits", format!("expected [K, H, W], got {s:?}")));
    }
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = t.data();
    Ok((0..hw).flat_map(|i| (0..k).map(move |c| d[c * hw + i])).collect())
}

fn pixel_major_to_chw(v: &[f64], k: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let data = (0..k).flat_map(|c| (0..hw).map(move |i| v[i * k + c])).collect();
    Tensor::new(vec![k, h, w], data).expect("chw")
}

pub fn depth_forward(image: &RgbImage, params: &ParamStore, cfg: &SpatialBlockConfig) -> Result<DepthMap> {
    let mut g = Graph::new();
    let enc = encode(&mut g, params, cfg, image)?;
    let d = decode_depth(&mut g, params, cfg, enc, image)?;
    DepthMap::new(image.height, image.width, g.value(d).to_vec())
}

/// Logits as `[K, H, W]` plus the argmax map.
pub fn seg_forward(image: &RgbImage, params: &ParamStore, cfg: &SpatialBlockConfig) -> Result<(Tensor, PanopticMap)> {
    let mut g = Graph::new();
    let enc = encode(&mut g, params, cfg, image)?;
    let l = decode_seg(&mut g, params, cfg, enc, image)?;
    let map = argmax_map(g.value(l), image.height, image.width, cfg.seg_classes);
    Ok((
        pixel_major_to_chw(g.value(l), cfg.seg_classes, image.height, image.width),
        map,
    ))
}

/// Encoder output for `image` as a `(h'*w') x C` tensor.
pub fn encoder_features(image: &RgbImage, params: &ParamStore, cfg: &SpatialBlockConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = encode(&mut g, params, cfg, image)?;
    Ok(g.to_tensor(enc))
}

/// Value-level region pooling over `(h'*w') x C` encoder features.
pub fn region_pool(
    map: &PanopticMap,
    encoder_features: &Tensor,
    params: &ParamStore,
    cfg: &SpatialBlockConfig,
) -> Result<RegionFeatureSet> {
    let mut g = Graph::new();
    let (r, c) = encoder_features.dims2();
    let enc = g.input(r, c, encoder_features.data().to_vec())?;
    let nodes = region_pool_nodes(&mut g, params, cfg, map, enc)?;
    Ok(RegionFeatureSet {
        regions: nodes.into_iter().map(|(k, id)| (k, g.value(id).to_vec())).collect(),
    })
}

pub fn encode_point_cloud(cloud: &PointCloud, params: &ParamStore) -> Result<PointCloudFeature> {
    if cloud.is_empty() {
        return Err(Error::EmptyDomain("point cloud has no points".into()));
    }
    let mut g = Graph::new();
    let pts = g.input(cloud.len(), 3, cloud.points.iter().flat_map(|p| p.iter().copied()).collect())?;
    let f = encode_point_cloud_node(&mut g, params, pts)?;
    Ok(PointCloudFeature(g.value(f).to_vec()))
}
