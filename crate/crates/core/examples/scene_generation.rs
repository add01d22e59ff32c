//! Generate one synthetic scene, list its relations, render a view and
//! print the templated text.

use ormllm::scenegen::{self, RenderConfig};

fn main() -> ormllm::Result<()> {
    let scene = scenegen::generate_scene(11)?;
    println!("scene seed {}", scene.seed);
    for e in scene.objects() {
        let c = e.bbox.center();
        println!("  {:<20} at ({:+.2}, {:+.2}, {:+.2})", e.class.name(), c[0], c[1], c[2]);
    }
    println!("scene graph: {}", scenegen::sgg_answer(&scene.relations));

    let text = scenegen::template_text(&scene, &scene.relations, scene.seed + 1);
    println!("description: {}", text.description);
    for qa in &text.qa {
        println!("  Q: {}  A: {}", qa.question, qa.answers.join(" | "));
    }

    let cfg = RenderConfig::default();
    let views = scenegen::render_views(&scene, 0, 3, &cfg, &text)?;
    for s in &views {
        let valid = s.gt_depth.valid_count();
        let classes = s.gt_seg.classes_present();
        println!(
            "view {}: {}x{}, {valid} pixels with depth, classes {classes:?}",
            s.view_id, s.rgb.height, s.rgb.width
        );
    }
    Ok(())
}
