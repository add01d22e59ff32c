//! Lift a depth map to a world-space point cloud, project it back, and
//! encode it with the order-independent point encoder.

use ormllm::geometry::{self, CameraIntrinsics, CameraPose, DepthMap};
use ormllm::pipeline;
use ormllm::config::RunConfig;
use ormllm::spatial;

fn main() -> ormllm::Result<()> {
    let k = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0)?;
    let pose = CameraPose::look_at([0.0, -4.0, 2.0], [0.0, 0.0, 0.5])?;
    // 0 marks a pixel with no depth.
    let depth = DepthMap::new(2, 2, vec![1.0, 2.0, 0.0, 4.0])?;
    let cloud = geometry::reconstruct_point_cloud(&depth, &k, &pose);
    for (p, (u, v)) in cloud.points.iter().zip(&cloud.source_pixels) {
        let (pu, pv, d) = geometry::project_point(p, &k, &pose)?;
        println!(
            "pixel ({u},{v}) -> ({:+.3}, {:+.3}, {:+.3}) -> ({pu:.3}, {pv:.3}) depth {d:.3}",
            p[0], p[1], p[2]
        );
    }

    let params = pipeline::init_spatial_params(&RunConfig::default());
    let f = spatial::encode_point_cloud(&cloud, &params)?;
    let mut reversed = cloud.clone();
    reversed.points.reverse();
    reversed.points.push(reversed.points[0]);
    let g = spatial::encode_point_cloud(&reversed, &params)?;
    println!("feature dim {}, unchanged by reorder + duplicate: {}", f.0.len(), f.0 == g.0);
    Ok(())
}
