//! Pseudo-modalities from one RGB view: depth, class map, region features
//! and the losses against the rendered ground truth.

use ormllm::config::RunConfig;
use ormllm::pipeline;
use ormllm::scenegen::{self, RenderConfig};
use ormllm::spatial;

fn main() -> ormllm::Result<()> {
    let run = RunConfig::default();
    let scene = scenegen::generate_scene(3)?;
    let text = scenegen::template_text(&scene, &scene.relations, 4);
    let view = scenegen::render_views(&scene, 0, 1, &RenderConfig::default(), &text)?.remove(0);

    let params = pipeline::init_spatial_params(&run);
    let sp = &run.spatial;
    let depth = spatial::depth_forward(&view.rgb, &params, sp)?;
    let (logits, map) = spatial::seg_forward(&view.rgb, &params, sp)?;
    let feats = spatial::encoder_features(&view.rgb, &params, sp)?;
    let regions = spatial::region_pool(&map, &feats, &params, sp)?;

    println!("encoder grid {:?}, features {:?}", sp.grid(), feats.shape());
    println!("predicted classes {:?}, {} region features", map.classes_present(), regions.regions.len());
    println!("depth loss {:.4}", spatial::depth_loss_value(&depth, &view.gt_depth, sp)?);
    println!("seg loss   {:.4}", spatial::seg_loss_value(&logits, &view.gt_seg, sp)?);
    println!("depth loss against itself {}", spatial::depth_loss_value(&view.gt_depth, &view.gt_depth, sp)?);
    Ok(())
}
