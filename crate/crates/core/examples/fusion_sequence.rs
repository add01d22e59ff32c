//! Assemble the fused LM input for one view and decode an answer with
//! untrained weights.

use ormllm::config::RunConfig;
use ormllm::fusion::{self, DecodeMode, Variant};
use ormllm::pipeline;
use ormllm::scenegen::{self, GenConfig};
use ormllm::spatial;

fn main() -> ormllm::Result<()> {
    let run = RunConfig::default();
    let ds = scenegen::generate_dataset(&GenConfig {
        seed: 1,
        scenes: 5,
        views: 1,
        ..GenConfig::default()
    })?;
    let fcfg = pipeline::fusion_config(&run, &ds.vocab)?;
    let mut params = pipeline::init_lm_params(&run, &fcfg);
    let spatial_params = pipeline::init_spatial_params(&run);
    let proj = pipeline::init_projection_params(&run, &fcfg, Variant::Full);
    for p in [&spatial_params, &proj] {
        for (name, t) in p.iter() {
            params.insert(name, t.clone());
        }
    }

    let s = &ds.samples[0];
    let sp = &run.spatial;
    let depth = spatial::depth_forward(&s.rgb, &params, sp)?;
    let (_, map) = spatial::seg_forward(&s.rgb, &params, sp)?;
    let feats = spatial::encoder_features(&s.rgb, &params, sp)?;
    let regions = spatial::region_pool(&map, &feats, &params, sp)?;
    let cloud = ormllm::geometry::reconstruct_point_cloud(&depth, &s.intrinsics, &s.pose);
    let pc = if cloud.is_empty() { None } else { Some(spatial::encode_point_cloud(&cloud, &params)?) };

    let image = fusion::project_image_tokens(&s.rgb, &params, &fcfg)?;
    let seg = fusion::project_seg_tokens(&regions, &params)?;
    let pc = fusion::project_pc_tokens(pc.as_ref(), &params, &fcfg)?;
    let prompts = pipeline::scene_prompts(&s.qa, &s.triples, &ds.vocab)?;
    let q = &prompts[0];
    let seq = fusion::build_input_sequence(&image, Some(&seg), Some(&pc), &q.question, &params, &fcfg, Variant::Full)?;
    println!("sequence: {} tokens of width {}", seq.len(), fcfg.d_token);
    let answer = fusion::decode_answer(&seq, &params, &fcfg, DecodeMode::Greedy, 6)?;
    println!("question: {}", ds.vocab.decode(&q.question));
    println!("untrained answer: `{}` (reference: {})", ds.vocab.decode(&answer), q.references.join(" | "));
    Ok(())
}
