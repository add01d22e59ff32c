//! Optimization primitives: contrastive alignment loss, learning-rate
//! schedule, AdamW, stage masks and the loss log.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{is_lm_param, is_pretrained_vision};
use crate::tape::{Graph, NodeId};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr_lm: f64,
    pub lr_vision: f64,
    pub lr_pretrained_vision: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub schedule: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda_clip: f64,
    pub tau: f64,
    pub seed: u64,
    /// Supervised depth/segmentation epochs run before Stage 2 tuning.
    pub spatial_epochs: usize,
    pub lr_spatial: f64,
    pub stage2_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr_lm: 3e-3,
            lr_vision: 2e-3,
            // The depth and class maps come from these tensors and get no
            // direct supervision in Stage 2.
            lr_pretrained_vision: 5e-5,
            batch_size: 8,
            epochs: 10,
            warmup_steps: 20,
            schedule: "cosine".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 0.01,
            dropout: 0.1,
            lambda_clip: 0.1,
            tau: 0.07,
            seed: 0,
            spatial_epochs: 3,
            lr_spatial: 2e-3,
            stage2_epochs: 12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !matches!(self.stage, 1 | 2) {
            return err(format!("stage must be 1 or 2, got {}", self.stage));
        }
        for (name, v) in [
            ("lr_lm", self.lr_lm),
            ("lr_vision", self.lr_vision),
            ("lr_pretrained_vision", self.lr_pretrained_vision),
            ("lr_spatial", self.lr_spatial),
            ("tau", self.tau),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return err(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.lambda_clip >= 0.0) {
            return err(format!("lambda_clip must be >= 0, got {}", self.lambda_clip));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.schedule != "cosine" {
            return err(format!("unknown schedule `{}`", self.schedule));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("adam betas must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Stage 1 trains exactly the language model; Stage 2 exactly the rest.
pub fn stage_mask(stage: u8) -> impl Fn(&str) -> bool {
    move |name: &str| if stage == 1 { is_lm_param(name) } else { !is_lm_param(name) }
}

/// Base learning rate of a tensor in the given stage.
pub fn base_rate(name: &str, stage: u8, cfg: &TrainConfig) -> f64 {
    if stage == 1 {
        cfg.lr_lm
    } else if is_pretrained_vision(name) {
        cfg.lr_pretrained_vision
    } else {
        cfg.lr_vision
    }
}

/// Linear warmup to 1, then cosine decay to 0 at `total_steps`.
pub fn lr_factor(step: usize, total_steps: usize, warmup: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be >= 1".into()));
    }
    if warmup >= total_steps {
        return Err(Error::Config(format!(
            "warmup_steps {warmup} must be below total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total {total_steps}")));
    }
    if step < warmup {
        return Ok(step as f64 / warmup as f64);
    }
    let frac = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

pub fn lr_at_step(step: usize, total_steps: usize, base: f64, warmup: usize) -> Result<f64> {
    Ok(base * lr_factor(step, total_steps, warmup)?)
}

pub fn stage2_loss(lm_loss: f64, contrast: f64, lambda_clip: f64) -> f64 {
    lm_loss + lambda_clip * contrast
}

fn unit_rows(x: &[f64], d: usize, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / d);
    for (i, row) in x.chunks(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::numeric(what, format!("row {i} has norm {n}; cosine undefined")));
        }
        norms.push(n);
        unit.extend(row.iter().map(|v| v / n));
    }
    Ok((unit, norms))
}

/// One-directional InfoNCE over cosine similarities; returns the value and
/// gradients with respect to `v` and `t` (`n x d` row-major each).
pub fn info_nce(v: &[f64], t: &[f64], d: usize, tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if d == 0 || v.len() != t.len() || v.is_empty() || v.len() % d != 0 {
        return Err(Error::dim("contrastive_loss", "image and text batches differ in shape"));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let n = v.len() / d;
    let (vn, vnorm) = unit_rows(v, d, "image features")?;
    let (tn, tnorm) = unit_rows(t, d, "text features")?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = 0.0;
    // dL/ds_ij
    let mut ds = vec![0.0; n * n];
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| dot(&vn[i * d..(i + 1) * d], &tn[j * d..(j + 1) * d]) / tau)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - s[i];
        for j in 0..n {
            ds[i * n + j] = ((s[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;
    let mut gvn = vec![0.0; n * d];
    let mut gtn = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let c = ds[i * n + j] / tau;
            for k in 0..d {
                gvn[i * d + k] += c * tn[j * d + k];
                gtn[j * d + k] += c * vn[i * d + k];
            }
        }
    }
    let project = |g: &[f64], u: &[f64], norms: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let (gi, ui) = (&g[i * d..(i + 1) * d], &u[i * d..(i + 1) * d]);
            let r = dot(gi, ui);
            for k in 0..d {
                out[i * d + k] = (gi[k] - r * ui[k]) / norms[i];
            }
        }
        out
    };
    Ok((loss, project(&gvn, &vn, &vnorm), project(&gtn, &tn, &tnorm)))
}

/// Value-level InfoNCE over a batch of feature vectors.
pub fn contrastive_loss(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<f64> {
    let d = v.first().map_or(0, Vec::len);
    if v.len() != t.len() || v.iter().chain(t).any(|r| r.len() != d) {
        return Err(Error::dim("contrastive_loss", "batch sizes or feature widths differ"));
    }
    Ok(info_nce(&v.concat(), &t.concat(), d, tau)?.0)
}

pub fn contrastive_loss_node(g: &mut Graph, v: NodeId, t: NodeId, tau: f64) -> Result<NodeId> {
    let d = g.dims(v).1;
    if g.dims(t) != g.dims(v) {
        return Err(Error::dim("contrastive_loss", "image and text batches differ in shape"));
    }
    let (value, gv, gt) = info_nce(g.value(v), g.value(t), d, tau)?;
    g.fused_loss(value, vec![(v, gv), (t, gt)])
}

/// Per-tensor first and second moments plus the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// Decoupled-weight-decay Adam update of every trainable tensor, using the
/// gradients stored on the tensors. `rate(name)` gives each tensor's
/// learning rate. Frozen tensors are never touched. A non-finite gradient
/// aborts the step before any tensor changes.
pub fn optimizer_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    cfg: &TrainConfig,
    rate: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, t) in params.iter() {
        if !t.requires_grad {
            continue;
        }
        match &t.grad {
            Some(g) if g.iter().all(|v| v.is_finite()) => {}
            Some(_) => return Err(Error::numeric(name, "non-finite gradient")),
            None => return Err(Error::Contract(format!("trainable tensor `{name}` has no gradient"))),
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    state.moments.resize(params.len(), None);
    for idx in 0..params.len() {
        let (name, t) = params.by_index_mut(idx);
        if !t.requires_grad {
            continue;
        }
        let lr = rate(name);
        let grad = t.grad.take().expect("checked above");
        let (m, v) = state.moments[idx].get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let data = t.data_mut();
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            data[i] -= lr * (mh / (vh.sqrt() + 1e-8) + cfg.weight_decay * data[i]);
        }
        t.grad = Some(grad);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: u8,
    pub lm_loss: f64,
    pub contrast_loss: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "step\tstage\tlm_loss\tcontrast_loss\ttotal\tlr";

/// Tab-separated loss log with `#` comment lines for the config echo.
pub fn format_loss_log(echo: &[(String, String)], records: &[LossRecord]) -> String {
    let mut s = String::new();
    for (k, v) in echo {
        let _ = writeln!(s, "# {k}\t{v}");
    }
    s.push_str(LOSS_LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.step, r.stage, r.lm_loss, r.contrast_loss, r.total, r.lr
        );
    }
    s
}

/// Mean of `total` per epoch given the number of batches per epoch.
pub fn epoch_means(records: &[LossRecord], batches_per_epoch: usize) -> Vec<f64> {
    records
        .chunks(batches_per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}
