//! Command-line front end: `gen-data`, `train`, `eval`, `ablate` and
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage, 3 contract,
//! 4 numeric, 5 compatibility.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::metrics::MetricReport;
use crate::pipeline::{self, Tasks};
use crate::scenegen::{self, Dataset, GenConfig};

#[derive(Debug, Parser)]
#[command(name = "ormllm", version, about = "Spatial-reasoning multimodal LM on synthetic operating-room scenes")]
pub struct Cli {
    /// Worker threads for generation and evaluation (falls back to
    /// ORMLLM_THREADS, then 1). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Scene text only, no rendered views.
        #[arg(long)]
        text_only: bool,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        /// Stage 1 checkpoint (required for stage 2).
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Loss log path (default: next to the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a Stage 2 checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "qa,sgg")]
        tasks: String,
        #[arg(long)]
        report: PathBuf,
        /// Also write every decoded answer.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate ablation variants (comma list or `all`).
    Ablate {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a Stage 1 checkpoint instead of training one.
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "qa,sgg")]
        tasks: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every training objective.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(cfg: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(cfg.config.as_deref(), &cfg.overrides)
}

fn with_extension(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn best_path(ckpt_out: &Path) -> PathBuf {
    with_extension(ckpt_out, ".best.ckpt")
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    if s == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',').map(|v| v.trim().parse()).collect()
}

pub fn gen_data(run: &RunConfig, out: &Path, text_only: bool, force: bool) -> Result<Dataset> {
    if out.exists() {
        if !force {
            return Err(Error::Config(format!("{} exists (use --force to replace it)", out.display())));
        }
        std::fs::remove_dir_all(out)?;
    }
    let gen = GenConfig {
        seed: run.seed,
        scenes: run.data.scenes,
        views: run.data.views,
        text_only,
        render: run.data.render.clone(),
    };
    let mut ds = scenegen::generate_dataset(&gen)?;
    ds.meta.extend(run.echo());
    scenegen::write_dataset(&ds, out)?;
    Ok(ds)
}

/// Metric report for a Stage 2 checkpoint. The checkpoint's own config is
/// the base; `overrides` only touch evaluation settings in practice.
pub fn eval_checkpoint(
    ck: &Checkpoint,
    ds: &Dataset,
    run: &RunConfig,
    split: &str,
    tasks: Tasks,
) -> Result<(MetricReport, Vec<pipeline::Prediction>)> {
    pipeline::check_compatible(ck, ds)?;
    let variant = pipeline::checkpoint_variant(ck)?;
    let fcfg = pipeline::fusion_config(run, &ds.vocab)?;
    let (mut report, preds) = pipeline::evaluate(ds, split, &ck.params, run, &fcfg, variant, tasks)?;
    report.echo.push(("variant".into(), variant.name().into()));
    report.echo.push(("split".into(), split.into()));
    report.echo.push(("decode".into(), if run.eval.beam <= 1 { "greedy".into() } else { format!("beam{}", run.eval.beam) }));
    for key in ["stage", "selected_epoch", "val_em_at_1", "vocab_fingerprint"] {
        if let Some(v) = ck.meta_value(key) {
            report.echo.push((format!("ckpt.{key}"), v.to_string()));
        }
    }
    report.echo.extend(run.echo());
    Ok((report, preds))
}

/// Stage 2 training for one variant; returns the final and (if kept) the
/// validation-selected checkpoints plus the loss log text.
pub fn stage2_checkpoints(
    ds: &Dataset,
    stage1: &Checkpoint,
    vfm: &crate::tensor::ParamStore,
    spatial_log: &[pipeline::SpatialRecord],
    run: &RunConfig,
    variant: Variant,
) -> Result<(Checkpoint, Option<Checkpoint>, String, String)> {
    pipeline::check_compatible(stage1, ds)?;
    if stage1.meta_value("stage") != Some("1") {
        return Err(Error::Contract("--ckpt-in must be a Stage 1 checkpoint".into()));
    }
    let fcfg = pipeline::fusion_config(run, &ds.vocab)?;
    let out = pipeline::train_stage2(ds, &stage1.params, Some(vfm), run, &fcfg, variant)?;
    let means = out.log.epoch_means();
    let fmt_means = means.iter().map(|m| format!("{m:.6}")).collect::<Vec<_>>().join(",");
    let final_ck = pipeline::stage_checkpoint(
        &out.params,
        pipeline::checkpoint_meta(run, ds, 2, Some(variant), &[("selected_epoch", "final".into())]),
    );
    let best = out.best.map(|(p, em, epoch)| {
        pipeline::stage_checkpoint(
            &p,
            pipeline::checkpoint_meta(
                run,
                ds,
                2,
                Some(variant),
                &[("selected_epoch", epoch.to_string()), ("val_em_at_1", format!("{em:.6}"))],
            ),
        )
    });
    let log = pipeline::loss_log(
        run,
        &[("variant", variant.name().into()), ("epoch_means", fmt_means)],
        &out.log,
    );
    let spatial = pipeline::format_spatial_log(&run.echo(), spatial_log);
    Ok((final_ck, best, log, spatial))
}

pub fn train_stage1_checkpoint(ds: &Dataset, run: &RunConfig, init: Option<&Checkpoint>) -> Result<(Checkpoint, String, Vec<f64>)> {
    let fcfg = pipeline::fusion_config(run, &ds.vocab)?;
    let mut params = match init {
        Some(ck) => {
            pipeline::check_compatible(ck, ds)?;
            ck.params.clone()
        }
        None => pipeline::init_lm_params(run, &fcfg),
    };
    let log = pipeline::train_stage1(ds, &mut params, run, &fcfg)?;
    let means = log.epoch_means();
    let fmt_means = means.iter().map(|m| format!("{m:.6}")).collect::<Vec<_>>().join(",");
    let ck = pipeline::stage_checkpoint(&params, pipeline::checkpoint_meta(run, ds, 1, None, &[]));
    let text = pipeline::loss_log(run, &[("epoch_means", fmt_means)], &log);
    Ok((ck, text, means))
}

fn summary_line(variant: Variant, r: &MetricReport) -> String {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        variant.name(),
        cell(r.rouge_l),
        cell(r.meteor),
        cell(r.cider),
        cell(r.em_at_1),
        cell(r.sgg_p),
        cell(r.sgg_r),
        cell(r.sgg_f1)
    )
}

fn run_gradcheck(seed: u64, corrupt: bool) -> Result<i32> {
    crate::tape::CORRUPT_DEPTH_ADJOINT.store(corrupt, std::sync::atomic::Ordering::Relaxed);
    let results = pipeline::gradcheck_suite(seed);
    crate::tape::CORRUPT_DEPTH_ADJOINT.store(false, std::sync::atomic::Ordering::Relaxed);
    let results = results?;
    let mut table = String::from("loss\ttensors\tmax_rel_error\tworst_tensor\tstatus\n");
    let mut failed = None;
    for (name, rep) in &results {
        let worst = rep.worst();
        let status = if rep.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(
            table,
            "{name}\t{}\t{:.3e}\t{}\t{status}",
            rep.tensors.len(),
            rep.max_rel_error(),
            worst.map_or("-", |w| w.name.as_str())
        );
        if !rep.passed() && failed.is_none() {
            failed = worst.map(|w| (name.to_string(), w.name.clone(), w.max_rel_error));
        }
    }
    print!("{table}");
    match failed {
        Some((loss, tensor, err)) => {
            eprintln!(
                "gradcheck failed: {loss}, worst tensor `{tensor}` relative error {err:.3e} > {:.0e}",
                pipeline::GRADCHECK_TOL
            );
            Ok(1)
        }
        None => Ok(0),
    }
}

pub fn thread_count(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("ORMLLM_THREADS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("ORMLLM_THREADS=`{s}` is not a number")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    Ok(n)
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let threads = thread_count(cli.threads)?;
    // A second call (tests in one process) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::GenData {
            seed,
            scenes,
            views,
            out,
            text_only,
            force,
            cfg,
        } => {
            let mut run = load_config(&cfg)?;
            if let Some(s) = seed {
                run.seed = s;
                run.train.seed = s;
            }
            if let Some(n) = scenes {
                run.data.scenes = n;
            }
            if let Some(n) = views {
                run.data.views = n;
            }
            run.validate()?;
            let ds = gen_data(&run, &out, text_only, force)?;
            println!(
                "wrote {}: {} scenes, {} samples, split {}/{}/{}",
                out.display(),
                ds.scenes.len(),
                ds.samples.len(),
                ds.split.train.len(),
                ds.split.val.len(),
                ds.split.test.len()
            );
            Ok(0)
        }
        Command::Train {
            stage,
            data,
            ckpt_in,
            ckpt_out,
            log,
            variant,
            cfg,
        } => {
            let run = load_config(&cfg)?;
            let variant: Variant = variant.parse()?;
            if stage == 2 && ckpt_in.is_none() {
                return Err(Error::Contract("stage 2 needs --ckpt-in from stage 1".into()));
            }
            let ds = scenegen::read_dataset(&data)?;
            let init = ckpt_in.as_deref().map(Checkpoint::load).transpose()?;
            let log_path = log.unwrap_or_else(|| with_extension(&ckpt_out, ".loss.tsv"));
            if stage == 1 {
                let (ck, text, means) = train_stage1_checkpoint(&ds, &run, init.as_ref())?;
                ck.save(&ckpt_out)?;
                write(&log_path, &text)?;
                println!("stage 1: {} epochs, epoch mean loss {:?}", means.len(), means);
            } else {
                let stage1 = init.expect("checked above");
                let (vfm, spatial_log) = pipeline::pretrain_spatial(&ds, &run)?;
                let (final_ck, best, text, spatial) = stage2_checkpoints(&ds, &stage1, &vfm, &spatial_log, &run, variant)?;
                final_ck.save(&ckpt_out)?;
                if let Some(b) = best {
                    b.save(&best_path(&ckpt_out))?;
                }
                write(&log_path, &text)?;
                write(&with_extension(&ckpt_out, ".spatial.tsv"), &spatial)?;
                println!("stage 2 ({variant}): wrote {}", ckpt_out.display());
            }
            Ok(0)
        }
        Command::Eval {
            ckpt,
            data,
            split,
            tasks,
            report,
            predictions,
            cfg,
        } => {
            let tasks = Tasks::parse(&tasks)?;
            let ds = scenegen::read_dataset(&data)?;
            let ck = Checkpoint::load(&ckpt)?;
            pipeline::check_compatible(&ck, &ds)?;
            let run = RunConfig::load_over(&ck.meta, cfg.config.as_deref(), &cfg.overrides)?;
            let (r, preds) = eval_checkpoint(&ck, &ds, &run, &split, tasks)?;
            let text = r.to_tsv();
            write(&report, &text)?;
            if let Some(p) = predictions {
                write(&p, &pipeline::format_predictions(&preds))?;
            }
            print!("{text}");
            Ok(0)
        }
        Command::Ablate {
            variant,
            data,
            out,
            ckpt_in,
            split,
            tasks,
            cfg,
        } => {
            let variants = parse_variants(&variant)?;
            let tasks = Tasks::parse(&tasks)?;
            let run = load_config(&cfg)?;
            let ds = scenegen::read_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let stage1 = match ckpt_in {
                Some(p) => Checkpoint::load(&p)?,
                None => {
                    let (ck, text, _) = train_stage1_checkpoint(&ds, &run, None)?;
                    ck.save(&out.join("stage1.ckpt"))?;
                    write(&out.join("stage1.loss.tsv"), &text)?;
                    ck
                }
            };
            let (vfm, spatial_log) = pipeline::pretrain_spatial(&ds, &run)?;
            let mut summary = String::new();
            for (k, v) in run.echo() {
                let _ = writeln!(summary, "# {k}\t{v}");
            }
            let _ = writeln!(summary, "# split\t{split}");
            summary.push_str("variant\trouge_l\tmeteor_simplified\tcider\tem_at_1\tsgg_p\tsgg_r\tsgg_f1\n");
            for v in variants {
                let dir = out.join(v.name());
                let (final_ck, best, text, spatial) = stage2_checkpoints(&ds, &stage1, &vfm, &spatial_log, &run, v)?;
                let ckpt_path = dir.join("stage2.ckpt");
                std::fs::create_dir_all(&dir)?;
                final_ck.save(&ckpt_path)?;
                write(&dir.join("stage2.loss.tsv"), &text)?;
                write(&dir.join("stage2.spatial.tsv"), &spatial)?;
                let chosen = match best {
                    Some(b) => {
                        b.save(&best_path(&ckpt_path))?;
                        b
                    }
                    None => final_ck,
                };
                let (r, preds) = eval_checkpoint(&chosen, &ds, &run, &split, tasks)?;
                write(&dir.join("report.tsv"), &r.to_tsv())?;
                write(&dir.join("predictions.tsv"), &pipeline::format_predictions(&preds))?;
                let line = summary_line(v, &r);
                print!("{line}");
                summary.push_str(&line);
            }
            write(&out.join("summary.tsv"), &summary)?;
            Ok(0)
        }
        Command::Gradcheck {
            seed,
            corrupt_adjoint,
            cfg,
        } => {
            let run = load_config(&cfg)?;
            run_gradcheck(seed.unwrap_or(run.seed), corrupt_adjoint)
        }
    }
}

/// Parses `std::env::args`, runs, and maps errors to exit codes.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
