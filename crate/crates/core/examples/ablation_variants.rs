//! What each fusion variant feeds the language model, and a quick
//! comparison of two of them on a toy dataset.

use ormllm::config::RunConfig;
use ormllm::fusion::Variant;
use ormllm::pipeline::{self, Tasks};
use ormllm::scenegen::{self, GenConfig};

fn main() -> ormllm::Result<()> {
    for v in Variant::ALL {
        println!(
            "{:<13} seg tokens {:<5} pc tokens {:<5} depth image {:<5} early fusion {}",
            v.name(),
            v.seg_tokens(),
            v.pc_tokens(),
            v.depth_image(),
            v.early_fusion()
        );
    }

    let run = RunConfig::load(None, &["train.epochs=2".into(), "train.stage2_epochs=1".into(), "train.spatial_epochs=1".into()])?;
    let ds = scenegen::generate_dataset(&GenConfig {
        seed: 2,
        scenes: 20,
        views: 1,
        ..GenConfig::default()
    })?;
    let fcfg = pipeline::fusion_config(&run, &ds.vocab)?;
    let mut lm = pipeline::init_lm_params(&run, &fcfg);
    pipeline::train_stage1(&ds, &mut lm, &run, &fcfg)?;
    let (vfm, _) = pipeline::pretrain_spatial(&ds, &run)?;
    for v in [Variant::Full, Variant::NoDepthSeg] {
        let out = pipeline::train_stage2(&ds, &lm, Some(&vfm), &run, &fcfg, v)?;
        let (r, _) = pipeline::evaluate(&ds, "val", &out.params, &run, &fcfg, v, Tasks::ALL)?;
        println!("{:<13} EM@1 {:.1}  SGG F1 {:.1}", v.name(), r.em_at_1.unwrap_or(0.0), r.sgg_f1.unwrap_or(0.0));
    }
    Ok(())
}
