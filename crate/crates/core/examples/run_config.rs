//! Resolve a run configuration from a file plus overrides and print the
//! echo that every artifact carries.

use ormllm::config::RunConfig;

fn main() -> ormllm::Result<()> {
    let dir = std::env::temp_dir().join(format!("ormllm-config-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("run.toml");
    std::fs::write(&path, "seed = 5\n[train]\nepochs = 2\nlr_lm = 0.001\n")?;
    let run = RunConfig::load(Some(&path), &["train.lr_lm=0.002".into(), "eval.beam=3".into()])?;
    for (k, v) in run.echo().iter().filter(|(k, _)| k.starts_with("config.train") || k == "tool" || k == "config.seed") {
        println!("{k} = {v}");
    }
    match RunConfig::load(None, &["train.epochz=1".into()]) {
        Err(e) => println!("typo rejected (exit {}): {e}", e.exit_code()),
        Ok(_) => println!("typo accepted"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
