//! Stage 1 on scene text, spatial pretraining, Stage 2 on fused views,
//! then evaluation on the test scenes. Small enough to finish in seconds.

use ormllm::config::RunConfig;
use ormllm::fusion::Variant;
use ormllm::pipeline::{self, Tasks};
use ormllm::scenegen::{self, GenConfig};

fn main() -> ormllm::Result<()> {
    let run = RunConfig::load(
        None,
        &["data.scenes=30".into(), "data.views=2".into(), "train.epochs=3".into(), "train.stage2_epochs=1".into(), "train.spatial_epochs=1".into()],
    )?;
    let ds = scenegen::generate_dataset(&GenConfig {
        seed: run.seed,
        scenes: run.data.scenes,
        views: run.data.views,
        text_only: false,
        render: run.data.render.clone(),
    })?;
    let fcfg = pipeline::fusion_config(&run, &ds.vocab)?;

    let mut lm = pipeline::init_lm_params(&run, &fcfg);
    let log = pipeline::train_stage1(&ds, &mut lm, &run, &fcfg)?;
    println!("stage 1 epoch means {:?}", log.epoch_means());

    let (vfm, spatial_log) = pipeline::pretrain_spatial(&ds, &run)?;
    if let Some(last) = spatial_log.last() {
        println!("spatial pretraining: final depth {:.4} seg {:.4}", last.depth_loss, last.seg_loss);
    }
    let out = pipeline::train_stage2(&ds, &lm, Some(&vfm), &run, &fcfg, Variant::Full)?;
    println!("stage 2 epoch means {:?}", out.log.epoch_means());

    let (report, preds) = pipeline::evaluate(&ds, "test", &out.params, &run, &fcfg, Variant::Full, Tasks::ALL)?;
    for (name, value) in report.rows() {
        println!("{name:<18} {value:.2}");
    }
    if let Some(p) = preds.first() {
        println!("first prediction: `{}` vs {:?}", p.candidate, p.references);
    }
    Ok(())
}
