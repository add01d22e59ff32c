//! Build a small dataset, write it to disk and read it back.

use ormllm::scenegen::{self, GenConfig};

fn main() -> ormllm::Result<()> {
    let cfg = GenConfig {
        seed: 7,
        scenes: 10,
        views: 3,
        ..GenConfig::default()
    };
    let ds = scenegen::generate_dataset(&cfg)?;
    let dir = std::env::temp_dir().join(format!("ormllm-example-{}", std::process::id()));
    scenegen::write_dataset(&ds, &dir)?;
    let back = scenegen::read_dataset(&dir)?;
    println!(
        "{} samples, split {}/{}/{} scenes, vocab {} tokens",
        back.samples.len(),
        back.split.train.len(),
        back.split.val.len(),
        back.split.test.len(),
        back.vocab.len()
    );
    assert_eq!(back.samples.len(), ds.samples.len());
    assert_eq!(back.vocab.fingerprint(), ds.vocab.fingerprint());
    for (k, v) in &back.meta {
        println!("  {k} = {v}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
