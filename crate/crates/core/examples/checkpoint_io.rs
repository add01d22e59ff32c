//! Save parameters with metadata, reload them, and show that a flipped
//! payload byte is rejected.

use ormllm::checkpoint::Checkpoint;
use ormllm::config::RunConfig;
use ormllm::pipeline;

fn main() -> ormllm::Result<()> {
    let params = pipeline::init_spatial_params(&RunConfig::default());
    let mut ck = Checkpoint::new(params);
    ck.meta.push(("stage".into(), "0".into()));
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    println!("{} tensors, {} bytes, re-save identical: {}", back.params.len(), bytes.len(), back.to_bytes() == bytes);

    let mut bad = bytes.clone();
    let last = bad.len() - 3;
    bad[last] ^= 0x40;
    match Checkpoint::from_bytes(&bad) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy rejected: {e}"),
    }
    Ok(())
}
