//! End-to-end runs: Stage 1 language-model training on scene text,
//! supervised pretraining of the spatial block, Stage 2 tuning of vision
//! and projection tensors, evaluation and the gradient-check suite.
//!
//! Stage 1 sequences are `description, <task>, question, <bos>, answer`.
//! Stage 2 and evaluation replace the description with visual tokens:
//! `image, seg, pc, <task>, question, <bos>, answer`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{self, DecodeMode, FusionConfig, Segments, TokenSequence, Variant};
use crate::gradcheck::{finite_diff_grad_check, GradCheckReport};
use crate::metrics::{parse_triples, EvalCorpus, MetricReport, ParsedTriples};
use crate::nn;
use crate::scenegen::{class_palette, sgg_answer, Dataset, Sample, SceneRecord, Triple, SGG_QUESTION};
use crate::spatial::{self, SpatialBlockConfig};
use crate::tape::{Graph, NodeId};
use crate::tensor::{Init, ParamStore};
use crate::text::{Vocabulary, TASK};
use crate::training::{
    base_rate, contrastive_loss_node, format_loss_log, lr_factor, optimizer_step, stage_mask, AdamState,
    LossRecord,
};

pub const FORMAT_VERSION: &str = "1";
/// Depth scale used when depth is fed as an image.
const DEPTH_IMAGE_SCALE: f64 = 1.0 / 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Qa,
    Sgg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tasks {
    pub qa: bool,
    pub sgg: bool,
}

impl Tasks {
    pub const ALL: Tasks = Tasks { qa: true, sgg: true };

    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Tasks { qa: false, sgg: false };
        for part in s.split(',').map(str::trim) {
            match part {
                "qa" => t.qa = true,
                "sgg" => t.sgg = true,
                _ => return Err(Error::Config(format!("unknown task `{part}` (expected qa, sgg)"))),
            }
        }
        Ok(t)
    }
}

/// One prompt of a scene: question ids (with the leading task marker),
/// training answer ids and every accepted reference answer.
#[derive(Clone, Debug)]
pub struct Prompt {
    pub task: Task,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub references: Vec<String>,
}

pub fn scene_prompts(qa: &[crate::scenegen::QaPair], triples: &[Triple], vocab: &Vocabulary) -> Result<Vec<Prompt>> {
    let question = |q: &str| -> Result<Vec<usize>> {
        let mut ids = vec![TASK];
        ids.extend(vocab.encode(q)?);
        Ok(ids)
    };
    let mut out = Vec::with_capacity(qa.len() + 1);
    for p in qa {
        let first = p
            .answers
            .first()
            .ok_or_else(|| Error::Contract(format!("question `{}` has no answer", p.question)))?;
        out.push(Prompt {
            task: Task::Qa,
            question: question(&p.question)?,
            answer: vocab.encode(first)?,
            references: p.answers.clone(),
        });
    }
    let sgg = sgg_answer(triples);
    out.push(Prompt {
        task: Task::Sgg,
        question: question(SGG_QUESTION)?,
        answer: vocab.encode(&sgg)?,
        references: vec![sgg],
    });
    Ok(out)
}

/// Fusion config with the vocabulary size filled in.
pub fn fusion_config(run: &RunConfig, vocab: &Vocabulary) -> Result<FusionConfig> {
    let mut f = run.fusion.clone();
    if f.vocab_size == 0 {
        f.vocab_size = vocab.len();
    }
    if f.vocab_size != vocab.len() {
        return Err(Error::Compatibility(format!(
            "fusion.vocab_size {} but the dataset vocabulary has {} tokens",
            f.vocab_size,
            vocab.len()
        )));
    }
    f.validate()?;
    Ok(f)
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn init_lm_params(run: &RunConfig, fcfg: &FusionConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(run.seed, 1));
    let mut store = ParamStore::new();
    fusion::init_lm(&mut store, &mut Init { rng: &mut rng }, fcfg);
    store
}

pub fn init_spatial_params(run: &RunConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(run.seed, 2));
    let mut store = ParamStore::new();
    spatial::init_params(&mut store, &mut Init { rng: &mut rng }, &run.spatial);
    store
}

pub fn init_projection_params(run: &RunConfig, fcfg: &FusionConfig, variant: Variant) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(run.seed, 3));
    let mut store = ParamStore::new();
    fusion::init_projections(&mut store, &mut Init { rng: &mut rng }, fcfg, &run.spatial, variant);
    store
}

fn merge(into: &mut ParamStore, from: &ParamStore) {
    for (k, v) in from.iter() {
        into.insert(k, v.clone());
    }
}

fn mean_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = *nodes
        .first()
        .ok_or_else(|| Error::EmptyDomain("no loss terms in batch".into()))?;
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(g.scale(acc, 1.0 / nodes.len() as f64))
}

/// Warmup clamped below the step count; steps run `1..=total` so the first
/// update is nonzero.
fn schedule(step: usize, total: usize, warmup: usize) -> Result<f64> {
    lr_factor(step, total + 1, warmup.min(total))
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 100 + epoch as u64)));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn training_graph(run: &RunConfig, stage_salt: u64, step: usize) -> Graph {
    Graph::new().with_dropout(
        run.train.dropout,
        ChaCha8Rng::seed_from_u64(mix(run.seed, stage_salt ^ (step as u64) << 8)),
    )
}

fn check_finite(value: f64, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} at step {step}"), format!("loss is {value}")))
    }
}

// ---- Stage 1 ----

/// Token ids, next-token targets and answer mask of one text sequence.
struct TextExample {
    ids: Vec<usize>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

fn text_example(prefix: &[usize], answer: &[usize]) -> TextExample {
    let (ans_in, ans_tgt) = fusion::answer_segment(answer);
    let mut ids = prefix.to_vec();
    ids.extend(&ans_in);
    let mut targets = vec![0; prefix.len()];
    targets.extend(ans_tgt);
    let mask = (0..ids.len()).map(|i| i >= prefix.len()).collect();
    TextExample { ids, targets, mask }
}

fn stage1_examples(records: &[&SceneRecord], vocab: &Vocabulary) -> Result<Vec<TextExample>> {
    let mut out = Vec::new();
    for r in records {
        let desc = vocab.encode(&r.description)?;
        for p in scene_prompts(&r.qa, &r.scene.relations, vocab)? {
            let mut prefix = desc.clone();
            prefix.extend(&p.question);
            out.push(text_example(&prefix, &p.answer));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct StageLog {
    pub records: Vec<LossRecord>,
    pub batches_per_epoch: usize,
}

impl StageLog {
    pub fn epoch_means(&self) -> Vec<f64> {
        crate::training::epoch_means(&self.records, self.batches_per_epoch)
    }
}

/// Trains the `lm.*` tensors of `params` on the text of the training
/// scenes. Accepts full or text-only datasets.
pub fn train_stage1(ds: &Dataset, params: &mut ParamStore, run: &RunConfig, fcfg: &FusionConfig) -> Result<StageLog> {
    let examples = stage1_examples(&ds.scenes_in("train")?, &ds.vocab)?;
    params.set_trainable(stage_mask(1));
    let cfg = &run.train;
    let batch_list = |epoch| batches(examples.len(), cfg.batch_size, run.seed, epoch);
    let bpe = examples.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * bpe;
    let mut log = StageLog {
        records: Vec::with_capacity(total),
        batches_per_epoch: bpe,
    };
    let mut adam = AdamState::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in batch_list(epoch) {
            step += 1;
            let mut g = training_graph(run, 1, step);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in &batch {
                let ex = &examples[i];
                let x = fusion::embed_ids(&mut g, params, &ex.ids)?;
                let h = fusion::lm_hidden(&mut g, params, fcfg, x)?;
                let l = fusion::lm_logits(&mut g, params, h)?;
                losses.push(fusion::answer_loss(&mut g, l, &ex.targets, &ex.mask)?);
            }
            let loss = mean_nodes(&mut g, &losses)?;
            let value = g.scalar(loss);
            check_finite(value, step, "stage 1 loss")?;
            let grads = g.backward(loss)?;
            params.zero_grads();
            grads.accumulate_into(params);
            let f = schedule(step, total, cfg.warmup_steps)?;
            optimizer_step(params, &mut adam, cfg, |n| base_rate(n, 1, cfg) * f)?;
            log.records.push(LossRecord {
                step,
                stage: 1,
                lm_loss: value,
                contrast_loss: 0.0,
                total: value,
                lr: cfg.lr_lm * f,
            });
        }
    }
    params.zero_grads();
    params.set_trainable(|_| false);
    Ok(log)
}

// ---- spatial pretraining ----

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialRecord {
    pub step: usize,
    pub depth_loss: f64,
    pub seg_loss: f64,
    pub lr: f64,
}

pub fn format_spatial_log(echo: &[(String, String)], records: &[SpatialRecord]) -> String {
    let mut s = String::new();
    for (k, v) in echo {
        let _ = writeln!(s, "# {k}\t{v}");
    }
    s.push_str("step\tdepth_loss\tseg_loss\ttotal\tlr\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.step,
            r.depth_loss,
            r.seg_loss,
            r.depth_loss + r.seg_loss,
            r.lr
        );
    }
    s
}

fn is_supervised_spatial(name: &str) -> bool {
    ["vfm.enc.", "vfm.depth.", "vfm.seg."].iter().any(|p| name.starts_with(p))
}

fn require_samples(ds: &Dataset) -> Result<()> {
    if ds.is_text_only() || ds.samples.is_empty() {
        return Err(Error::Contract("Stage 2 needs a full multimodal dataset, got a text-only one".into()));
    }
    Ok(())
}

/// Supervised depth and segmentation training of freshly initialized
/// spatial-block tensors on the training views.
pub fn pretrain_spatial(ds: &Dataset, run: &RunConfig) -> Result<(ParamStore, Vec<SpatialRecord>)> {
    require_samples(ds)?;
    let cfg = &run.train;
    let sp = &run.spatial;
    let samples = ds.samples_in("train")?;
    let mut params = init_spatial_params(run);
    params.set_trainable(is_supervised_spatial);
    let bpe = samples.len().div_ceil(cfg.batch_size);
    let total = cfg.spatial_epochs * bpe;
    let mut adam = AdamState::default();
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.spatial_epochs {
        for batch in batches(samples.len(), cfg.batch_size, mix(run.seed, 7), epoch) {
            step += 1;
            let mut g = training_graph(run, 2, step);
            let (mut dl, mut sl) = (Vec::new(), Vec::new());
            for &i in &batch {
                let s = samples[i];
                let n = spatial::forward(&mut g, &params, sp, &s.rgb, true, true)?;
                dl.push(spatial::depth_loss(&mut g, n.depth.expect("requested"), &s.gt_depth, sp)?);
                sl.push(spatial::seg_loss(&mut g, n.seg_logits.expect("requested"), &s.gt_seg, sp)?);
            }
            let d = mean_nodes(&mut g, &dl)?;
            let sgl = mean_nodes(&mut g, &sl)?;
            let loss = g.add(d, sgl)?;
            check_finite(g.scalar(loss), step, "spatial loss")?;
            let grads = g.backward(loss)?;
            params.zero_grads();
            grads.accumulate_into(&mut params);
            let f = schedule(step, total, cfg.warmup_steps)?;
            optimizer_step(&mut params, &mut adam, cfg, |_| cfg.lr_spatial * f)?;
            records.push(SpatialRecord {
                step,
                depth_loss: g.scalar(d),
                seg_loss: g.scalar(sgl),
                lr: cfg.lr_spatial * f,
            });
        }
    }
    params.zero_grads();
    params.set_trainable(|_| false);
    Ok((params, records))
}

// ---- Stage 2 ----

/// Visual segments of one view for `variant`, plus the image-tagged token
/// nodes used for the pooled image feature.
pub fn visual_segments(
    g: &mut Graph,
    params: &ParamStore,
    sp: &SpatialBlockConfig,
    fcfg: &FusionConfig,
    variant: Variant,
    sample: &Sample,
) -> Result<Segments> {
    let img = &sample.rgb;
    let (h, w) = (img.height, img.width);
    let n = spatial::forward(g, params, sp, img, variant.needs_depth(), variant.needs_seg())?;
    let depth_vals: Option<Vec<f64>> = n.depth.map(|d| g.value(d).iter().map(|v| v * DEPTH_IMAGE_SCALE).collect());
    let mut image = Vec::new();
    if variant.early_fusion() {
        let k = sp.seg_classes;
        let depth = depth_vals.as_ref().expect("early fusion uses depth");
        let map = n.seg_map.as_ref().expect("early fusion uses seg");
        let c = variant.image_channels(k);
        let mut px = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            px.extend_from_slice(&img.data[3 * i..3 * i + 3]);
            px.push(depth[i]);
            px.extend((1..=k as u8).map(|cl| f64::from(u8::from(map.ids[i] == cl))));
        }
        image.push(fusion::image_tokens(g, params, fcfg, &px, h, w, c)?);
    } else {
        image.push(fusion::image_tokens(g, params, fcfg, &img.data, h, w, 3)?);
        if variant.depth_image() {
            let d = depth_vals.as_ref().expect("depth image uses depth");
            let px: Vec<f64> = d.iter().flat_map(|&v| [v, v, v]).collect();
            image.push(fusion::image_tokens(g, params, fcfg, &px, h, w, 3)?);
        }
        if variant.seg_image() {
            let map = n.seg_map.as_ref().expect("seg image uses seg");
            image.push(fusion::image_tokens(g, params, fcfg, &class_palette(&map.ids), h, w, 3)?);
        }
    }
    let seg = if variant.seg_tokens() {
        let map = n.seg_map.as_ref().expect("seg tokens use seg");
        let regions = spatial::region_pool_nodes(g, params, sp, map, n.enc)?;
        let nodes: Vec<NodeId> = regions.into_iter().map(|r| r.1).collect();
        Some(fusion::seg_tokens(g, params, &nodes)?)
    } else {
        None
    };
    let pc = if variant.pc_tokens() {
        let depth = n.depth.expect("pc tokens use depth");
        let pts = spatial::back_project_node(g, depth, h, w, &sample.intrinsics, &sample.pose)?;
        let feat = spatial::encode_point_cloud_node(g, params, pts)?;
        Some(fusion::pc_tokens(g, params, fcfg, Some(feat))?)
    } else {
        None
    };
    Ok(Segments { image, seg, pc })
}

/// Pooled image feature `1 x d` for the contrastive term.
fn pooled_image(g: &mut Graph, params: &ParamStore, segs: &Segments) -> Result<NodeId> {
    let all = g.concat_rows(&segs.image)?;
    let mean = g.mean_all_rows(all)?;
    nn::linear(g, params, "proj.pool", mean)
}

/// Frozen-LM text feature of each scene: the final hidden state at the task
/// marker following the description.
pub fn text_features(ds: &Dataset, params: &ParamStore, fcfg: &FusionConfig) -> Result<Vec<Vec<f64>>> {
    ds.scenes
        .iter()
        .map(|r| {
            let mut ids = ds.vocab.encode(&r.description)?;
            ids.push(TASK);
            let mut g = Graph::new();
            let x = fusion::embed_ids(&mut g, params, &ids)?;
            let h = fusion::lm_hidden(&mut g, params, fcfg, x)?;
            let d = fcfg.d_token;
            Ok(g.value(h)[(ids.len() - 1) * d..].to_vec())
        })
        .collect()
}

fn scene_index(ds: &Dataset) -> Result<std::collections::HashMap<u64, usize>> {
    let idx: std::collections::HashMap<u64, usize> =
        ds.scenes.iter().enumerate().map(|(i, r)| (r.scene_id, i)).collect();
    for s in &ds.samples {
        if !idx.contains_key(&s.scene_id) {
            return Err(Error::Contract(format!("sample references unknown scene {}", s.scene_id)));
        }
    }
    Ok(idx)
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub params: ParamStore,
    pub log: StageLog,
    /// Parameters with the best validation EM@1, with that score and epoch.
    pub best: Option<(ParamStore, f64, usize)>,
}

/// Stage 2: the LM from `lm` is frozen; vision and projection tensors
/// train on `lm_loss + lambda_clip * contrast`. `spatial_init` holds the
/// pretrained spatial block (fresh initialization when `None`).
pub fn train_stage2(
    ds: &Dataset,
    lm: &ParamStore,
    spatial_init: Option<&ParamStore>,
    run: &RunConfig,
    fcfg: &FusionConfig,
    variant: Variant,
) -> Result<Stage2Output> {
    require_samples(ds)?;
    if lm.names().all(|n| !fusion::is_lm_param(n)) {
        return Err(Error::Contract("Stage 2 needs Stage 1 language-model tensors".into()));
    }
    let cfg = &run.train;
    let mut params = ParamStore::new();
    for (k, v) in lm.iter().filter(|(k, _)| fusion::is_lm_param(k)) {
        params.insert(k, v.clone());
    }
    match spatial_init {
        Some(s) => merge(&mut params, s),
        None => merge(&mut params, &init_spatial_params(run)),
    }
    merge(&mut params, &init_projection_params(run, fcfg, variant));
    params.set_trainable(stage_mask(2));

    let texts = text_features(ds, &params, fcfg)?;
    let idx = scene_index(ds)?;
    let samples = ds.samples_in("train")?;
    let prompts: Vec<Vec<Prompt>> = samples
        .iter()
        .map(|s| scene_prompts(&s.qa, &s.triples, &ds.vocab))
        .collect::<Result<_>>()?;

    let bpe = samples.len().div_ceil(cfg.batch_size);
    let total = cfg.stage2_epochs * bpe;
    let mut log = StageLog {
        records: Vec::with_capacity(total),
        batches_per_epoch: bpe,
    };
    let mut best: Option<(ParamStore, f64, usize)> = None;
    let mut adam = AdamState::default();
    let mut step = 0;
    for epoch in 0..cfg.stage2_epochs {
        for batch in batches(samples.len(), cfg.batch_size, mix(run.seed, 9), epoch) {
            step += 1;
            let mut g = training_graph(run, 3, step);
            let mut lm_terms = Vec::new();
            let mut pooled = Vec::with_capacity(batch.len());
            let mut text_rows = Vec::with_capacity(batch.len() * fcfg.d_token);
            for &i in &batch {
                let s = samples[i];
                let segs = visual_segments(&mut g, &params, &run.spatial, fcfg, variant, s)?;
                for p in &prompts[i] {
                    let (ans_in, ans_tgt) = fusion::answer_segment(&p.answer);
                    let q = fusion::embed_ids(&mut g, &params, &p.question)?;
                    let a = fusion::embed_ids(&mut g, &params, &ans_in)?;
                    let (x, tags) = fusion::assemble(&mut g, fcfg, &segs, q, Some(a))?;
                    let n = tags.len();
                    let start = n - ans_in.len();
                    let h = fusion::lm_hidden(&mut g, &params, fcfg, x)?;
                    let l = fusion::lm_logits(&mut g, &params, h)?;
                    let mut targets = vec![0; start];
                    targets.extend(&ans_tgt);
                    let mask: Vec<bool> = (0..n).map(|j| j >= start).collect();
                    lm_terms.push(fusion::answer_loss(&mut g, l, &targets, &mask)?);
                }
                pooled.push(pooled_image(&mut g, &params, &segs)?);
                text_rows.extend(&texts[idx[&s.scene_id]]);
            }
            let lm_loss = mean_nodes(&mut g, &lm_terms)?;
            let v = g.concat_rows(&pooled)?;
            let t = g.input(batch.len(), fcfg.d_token, text_rows)?;
            let c = contrastive_loss_node(&mut g, v, t, cfg.tau)?;
            let weighted = g.scale(c, cfg.lambda_clip);
            let loss = g.add(lm_loss, weighted)?;
            let value = g.scalar(loss);
            check_finite(value, step, "stage 2 loss")?;
            let grads = g.backward(loss)?;
            params.zero_grads();
            grads.accumulate_into(&mut params);
            let f = schedule(step, total, cfg.warmup_steps)?;
            optimizer_step(&mut params, &mut adam, cfg, |n| base_rate(n, 2, cfg) * f)?;
            log.records.push(LossRecord {
                step,
                stage: 2,
                lm_loss: g.scalar(lm_loss),
                contrast_loss: g.scalar(c),
                total: value,
                lr: cfg.lr_vision * f,
            });
        }
        if run.eval.select_on_val && !ds.split.val.is_empty() {
            params.zero_grads();
            let qa_only = Tasks { qa: true, sgg: false };
            let (report, _) = evaluate(ds, "val", &params, run, fcfg, variant, qa_only)?;
            let em = report.em_at_1.unwrap_or(0.0);
            if best.as_ref().is_none_or(|b| em > b.1) {
                best = Some((params.clone(), em, epoch + 1));
            }
        }
    }
    params.zero_grads();
    params.set_trainable(|_| false);
    if let Some(b) = best.as_mut() {
        b.0.set_trainable(|_| false);
    }
    Ok(Stage2Output { params, log, best })
}

// ---- evaluation ----

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scene_id: u64,
    pub view_id: usize,
    pub task: Task,
    pub candidate: String,
    pub references: Vec<String>,
}

fn predict_sample(
    sample: &Sample,
    vocab: &Vocabulary,
    params: &ParamStore,
    run: &RunConfig,
    fcfg: &FusionConfig,
    variant: Variant,
    tasks: Tasks,
) -> Result<Vec<Prediction>> {
    let mut g = Graph::new();
    let segs = visual_segments(&mut g, params, &run.spatial, fcfg, variant, sample)?;
    let mode = if run.eval.beam <= 1 {
        DecodeMode::Greedy
    } else {
        DecodeMode::Beam(run.eval.beam)
    };
    let mut out = Vec::new();
    for p in scene_prompts(&sample.qa, &sample.triples, vocab)? {
        let (wanted, max_new) = match p.task {
            Task::Qa => (tasks.qa, run.eval.qa_max_new_tokens),
            Task::Sgg => (tasks.sgg, run.eval.sgg_max_new_tokens),
        };
        if !wanted {
            continue;
        }
        let q = fusion::embed_ids(&mut g, params, &p.question)?;
        let (x, tags) = fusion::assemble(&mut g, fcfg, &segs, q, None)?;
        let seq = TokenSequence {
            tokens: g.to_tensor(x),
            tags,
        };
        let ids = fusion::decode_answer(&seq, params, fcfg, mode, max_new)?;
        out.push(Prediction {
            scene_id: sample.scene_id,
            view_id: sample.view_id,
            task: p.task,
            candidate: vocab.decode(&ids),
            references: p.references,
        });
    }
    Ok(out)
}

/// Decodes every prompt of every view in `part` and scores them.
/// Parallel over views; results keep dataset order.
pub fn evaluate(
    ds: &Dataset,
    part: &str,
    params: &ParamStore,
    run: &RunConfig,
    fcfg: &FusionConfig,
    variant: Variant,
    tasks: Tasks,
) -> Result<(MetricReport, Vec<Prediction>)> {
    require_samples(ds)?;
    let samples = ds.samples_in(part)?;
    if samples.is_empty() {
        return Err(Error::EmptyDomain(format!("split `{part}` has no samples")));
    }
    let per_sample: Vec<Vec<Prediction>> = samples
        .par_iter()
        .map(|s| predict_sample(s, &ds.vocab, params, run, fcfg, variant, tasks))
        .collect::<Result<_>>()?;
    let preds: Vec<Prediction> = per_sample.into_iter().flatten().collect();
    let mut report = MetricReport::default();
    if tasks.qa {
        let mut corpus = EvalCorpus::default();
        for p in preds.iter().filter(|p| p.task == Task::Qa) {
            corpus.push(p.candidate.clone(), p.references.clone())?;
        }
        report.from_qa(&corpus)?;
    }
    if tasks.sgg {
        let items: Vec<(ParsedTriples, Vec<Triple>)> = preds
            .iter()
            .filter(|p| p.task == Task::Sgg)
            .map(|p| (parse_triples(&p.candidate), parse_triples(&p.references[0]).triples))
            .collect();
        report.from_sgg(&items);
    }
    Ok((report, preds))
}

pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut s = String::from("scene\tview\ttask\tcandidate\treference\n");
    for p in preds {
        let task = match p.task {
            Task::Qa => "qa",
            Task::Sgg => "sgg",
        };
        let _ = writeln!(
            s,
            "{}\t{}\t{task}\t{}\t{}",
            p.scene_id,
            p.view_id,
            p.candidate,
            p.references.join(" || ")
        );
    }
    s
}

// ---- checkpoints ----

pub fn checkpoint_meta(
    run: &RunConfig,
    ds: &Dataset,
    stage: u8,
    variant: Option<Variant>,
    extra: &[(&str, String)],
) -> Vec<(String, String)> {
    let mut meta = vec![
        ("format".to_string(), FORMAT_VERSION.to_string()),
        ("stage".into(), stage.to_string()),
        ("variant".into(), variant.map_or("none".into(), |v| v.name().to_string())),
        ("vocab_fingerprint".into(), ds.vocab.fingerprint()),
        ("dataset_generator".into(), ds.meta_value("generator").unwrap_or("unknown").to_string()),
    ];
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    meta.extend(run.echo());
    meta
}

pub fn stage_checkpoint(params: &ParamStore, meta: Vec<(String, String)>) -> Checkpoint {
    let mut ck = Checkpoint::new(params.clone());
    ck.meta = meta;
    ck
}

/// Refuses checkpoints from another format version or vocabulary.
pub fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ck.meta_value("format") != Some(FORMAT_VERSION) {
        return Err(Error::Compatibility(format!(
            "checkpoint format {:?}, expected {FORMAT_VERSION}",
            ck.meta_value("format")
        )));
    }
    let want = ds.vocab.fingerprint();
    match ck.meta_value("vocab_fingerprint") {
        Some(f) if f == want => Ok(()),
        other => Err(Error::Compatibility(format!(
            "checkpoint vocabulary {other:?} does not match dataset vocabulary {want}"
        ))),
    }
}

pub fn checkpoint_variant(ck: &Checkpoint) -> Result<Variant> {
    ck.meta_value("variant")
        .ok_or_else(|| Error::Contract("checkpoint has no variant".into()))?
        .parse()
        .map_err(|_| Error::Contract("checkpoint was not trained by Stage 2".into()))
}

pub fn loss_log(run: &RunConfig, extra: &[(&str, String)], log: &StageLog) -> String {
    let mut echo: Vec<(String, String)> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    echo.extend(run.echo());
    format_loss_log(&echo, &log.records)
}

// ---- gradient checks ----

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

fn tiny_spatial() -> SpatialBlockConfig {
    SpatialBlockConfig {
        image_height: 8,
        image_width: 8,
        encoder_blocks: 1,
        encoder_dim: 16,
        encoder_heads: 2,
        depth_decoder_stages: 1,
        seg_classes: 3,
        seg_hidden: 8,
        pc_hidden: 8,
        pc_dim: 8,
        ..SpatialBlockConfig::default()
    }
}

fn tiny_fusion() -> FusionConfig {
    FusionConfig {
        d_token: 16,
        lm_layers: 2,
        lm_heads: 2,
        vocab_size: 12,
        max_seq_len: 64,
        image_patch: 4,
        pc_tokens: 1,
    }
}

fn tiny_sample(seed: u64, sp: &SpatialBlockConfig) -> Result<Sample> {
    use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap};
    use crate::image::RgbImage;
    use crate::spatial::PanopticMap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (sp.image_height, sp.image_width);
    let n = h * w;
    let mut depth: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..6.0)).collect();
    depth[1] = 0.0;
    let ids = (0..n).map(|_| rng.gen_range(1..=sp.seg_classes as u8)).collect();
    Ok(Sample {
        scene_id: seed,
        view_id: 0,
        rgb: RgbImage::new(h, w, (0..n * 3).map(|_| rng.gen()).collect())?,
        gt_depth: DepthMap::new(h, w, depth)?,
        gt_seg: PanopticMap::new(h, w, ids, sp.seg_classes)?,
        intrinsics: CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5)?,
        pose: CameraPose::look_at([3.0, -3.0, 2.0], [0.0, 0.0, 0.5])?,
        triples: Vec::new(),
        description: String::new(),
        qa: Vec::new(),
    })
}

/// Finite-difference checks of the five training objectives on tiny
/// random models, in order: depth, segmentation, answer, contrastive and
/// the Stage 2 composite.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let sp = tiny_spatial();
    let fc = tiny_fusion();
    let mut run = RunConfig::default();
    run.seed = seed;
    run.spatial = sp.clone();
    let mut base = init_lm_params(&run, &fc);
    merge(&mut base, &init_spatial_params(&run));
    merge(&mut base, &init_projection_params(&run, &fc, Variant::Full));
    let samples = [tiny_sample(mix(seed, 11), &sp)?, tiny_sample(mix(seed, 12), &sp)?];
    let s0 = &samples[0];
    let check = |f: &dyn Fn(&ParamStore, &mut Graph) -> Result<NodeId>, pred: &dyn Fn(&str) -> bool, salt| {
        let mut p = base.clone();
        p.set_trainable(pred);
        finite_diff_grad_check(f, &p, GRADCHECK_STEP, GRADCHECK_TOL, mix(seed, salt))
    };
    let mut out = Vec::new();

    let depth = |p: &ParamStore, g: &mut Graph| {
        let n = spatial::forward(g, p, &sp, &s0.rgb, true, false)?;
        spatial::depth_loss(g, n.depth.expect("depth"), &s0.gt_depth, &sp)
    };
    out.push((
        "depth_loss",
        check(&depth, &|n| n.starts_with("vfm.enc.") || n.starts_with("vfm.depth."), 21)?,
    ));

    let seg = |p: &ParamStore, g: &mut Graph| {
        let n = spatial::forward(g, p, &sp, &s0.rgb, false, true)?;
        spatial::seg_loss(g, n.seg_logits.expect("seg"), &s0.gt_seg, &sp)
    };
    out.push((
        "seg_loss",
        check(&seg, &|n| n.starts_with("vfm.enc.") || n.starts_with("vfm.seg."), 22)?,
    ));

    let ex = text_example(&[4, 5, 6, 7, TASK, 8], &[9, 10, 11]);
    let answer = |p: &ParamStore, g: &mut Graph| {
        let x = fusion::embed_ids(g, p, &ex.ids)?;
        let h = fusion::lm_hidden(g, p, &fc, x)?;
        let l = fusion::lm_logits(g, p, h)?;
        fusion::answer_loss(g, l, &ex.targets, &ex.mask)
    };
    out.push(("answer_loss", check(&answer, &fusion::is_lm_param, 23)?));

    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 13));
    let text: Vec<f64> = (0..3 * fc.d_token).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let images: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..sp.image_height * sp.image_width * 3).map(|_| rng.gen()).collect())
        .collect();
    let contrast = |p: &ParamStore, g: &mut Graph| {
        let mut v = Vec::new();
        for px in &images {
            let tok = fusion::image_tokens(g, p, &fc, px, sp.image_height, sp.image_width, 3)?;
            let segs = Segments {
                image: vec![tok],
                ..Segments::default()
            };
            v.push(pooled_image(g, p, &segs)?);
        }
        let v = g.concat_rows(&v)?;
        let t = g.input(3, fc.d_token, text.clone())?;
        contrastive_loss_node(g, v, t, 0.07)
    };
    out.push(("contrastive_loss", check(&contrast, &|n| n.starts_with("proj.img.") || n == "proj.pool.w" || n == "proj.pool.b", 24)?));

    // The segmentation map picked by argmax is held fixed so the objective
    // is smooth in the parameters.
    let maps: Vec<_> = samples
        .iter()
        .map(|s| spatial::seg_forward(&s.rgb, &base, &sp).map(|r| r.1))
        .collect::<Result<_>>()?;
    let lambda = run.train.lambda_clip;
    let prompt = text_example(&[TASK, 5, 6], &[7, 8]);
    let stage2 = |p: &ParamStore, g: &mut Graph| {
        let mut terms = Vec::new();
        let mut pooled = Vec::new();
        for (s, map) in samples.iter().zip(&maps) {
            let n = spatial::forward(g, p, &sp, &s.rgb, true, false)?;
            let img = fusion::image_tokens(g, p, &fc, &s.rgb.data, sp.image_height, sp.image_width, 3)?;
            let regions: Vec<NodeId> = spatial::region_pool_nodes(g, p, &sp, map, n.enc)?
                .into_iter()
                .map(|r| r.1)
                .collect();
            let seg = fusion::seg_tokens(g, p, &regions)?;
            let pts = spatial::back_project_node(g, n.depth.expect("depth"), sp.image_height, sp.image_width, &s.intrinsics, &s.pose)?;
            let feat = spatial::encode_point_cloud_node(g, p, pts)?;
            let pc = fusion::pc_tokens(g, p, &fc, Some(feat))?;
            let segs = Segments {
                image: vec![img],
                seg: Some(seg),
                pc: Some(pc),
            };
            let q = fusion::embed_ids(g, p, &prompt.ids)?;
            let (x, tags) = fusion::assemble(g, &fc, &segs, q, None)?;
            let start = tags.len() - prompt.ids.len();
            let h = fusion::lm_hidden(g, p, &fc, x)?;
            let l = fusion::lm_logits(g, p, h)?;
            let mut targets = vec![0; start];
            targets.extend(&prompt.targets);
            let mut mask = vec![false; start];
            mask.extend(&prompt.mask);
            terms.push(fusion::answer_loss(g, l, &targets, &mask)?);
            pooled.push(pooled_image(g, p, &segs)?);
        }
        let lm = mean_nodes(g, &terms)?;
        let v = g.concat_rows(&pooled)?;
        let t = g.input(2, fc.d_token, text[..2 * fc.d_token].to_vec())?;
        let c = contrastive_loss_node(g, v, t, 0.07)?;
        let wc = g.scale(c, lambda);
        g.add(lm, wc)
    };
    out.push(("stage2_loss", check(&stage2, &stage_mask(2), 25)?));
    Ok(out)
}
