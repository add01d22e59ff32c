//! The `ormllm` binary: exit codes, file formats and determinism on tiny
//! runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set",
    "train.epochs=1",
    "--set",
    "train.stage2_epochs=1",
    "--set",
    "train.spatial_epochs=1",
    "--set",
    "eval.sgg_max_new_tokens=12",
    "--set",
    "eval.select_on_val=false",
];

fn ormllm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ormllm"))
        .args(args)
        .env_remove("ORMLLM_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, seed: &str, scenes: &str, views: &str) -> PathBuf {
    let out = dir.join(name);
    let o = ormllm(&["gen-data", "--seed", seed, "--scenes", scenes, "--views", views, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

/// Stage 1 then Stage 2 on `data`; returns the Stage 2 checkpoint path.
fn train_both(dir: &Path, data: &Path) -> PathBuf {
    let s1 = dir.join("s1.ckpt");
    let s2 = dir.join("s2.ckpt");
    let mut a = vec!["train", "--stage", "1", "--data", s(data), "--ckpt-out", s(&s1)];
    a.extend(TINY);
    let o = ormllm(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut a = vec!["train", "--stage", "2", "--data", s(data), "--ckpt-in", s(&s1), "--ckpt-out", s(&s2)];
    a.extend(TINY);
    let o = ormllm(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    s2
}

fn dir_bytes(d: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_counts_split_and_reruns() {
    let t = tempfile::tempdir().unwrap();
    let a = gen(t.path(), "a", "7", "10", "3");
    let ds = ormllm::scenegen::read_dataset(&a).unwrap();
    assert_eq!(ds.samples.len(), 30);
    assert_eq!((ds.split.train.len(), ds.split.val.len(), ds.split.test.len()), (6, 2, 2));
    assert_eq!(ds.meta_value("tool"), Some(ormllm::config::TOOL_VERSION));
    assert_eq!(ds.meta_value("config.seed"), Some("7"));

    let b = gen(t.path(), "b", "7", "10", "3");
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    // Existing directory needs --force.
    let o = ormllm(&["gen-data", "--seed", "7", "--scenes", "10", "--out", s(&a)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = ormllm(&["gen-data", "--seed", "7", "--scenes", "10", "--views", "3", "--out", s(&a), "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let o = ormllm(&["gen-data", "--scenes", "0", "--out", s(&t.path().join("z"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn text_only_dataset_has_no_views() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("txt");
    let o = ormllm(&["gen-data", "--seed", "1", "--scenes", "5", "--text-only", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(!out.join("samples.jsonl").exists());
    let ds = ormllm::scenegen::read_dataset(&out).unwrap();
    assert!(ds.is_text_only());
    assert_eq!(ds.scenes.len(), 5);
}

#[test]
fn usage_and_contract_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "d", "2", "5", "1");
    let o = ormllm(&["train", "--stage", "2", "--data", s(&data), "--ckpt-out", s(&t.path().join("x"))]);
    assert_eq!(code(&o), 3);
    let o = ormllm(&["train", "--stage", "3", "--data", s(&data), "--ckpt-out", "x"]);
    assert_eq!(code(&o), 2);
    let o = ormllm(&["ablate", "--variant", "no-such", "--data", s(&data), "--out", s(&t.path().join("ab"))]);
    assert_eq!(code(&o), 2);
    let o = ormllm(&["train", "--stage", "1", "--data", s(&data), "--ckpt-out", "x", "--set", "train.nope=1"]);
    assert_eq!(code(&o), 2);
    let o = ormllm(&["train", "--stage", "1", "--data", s(&t.path().join("missing")), "--ckpt-out", "x"]);
    assert_eq!(code(&o), 3);
    let o = ormllm(&["--threads", "0", "gradcheck"]);
    assert_eq!(code(&o), 2);
    // Stage 1 checkpoint is not a Stage 2 one and vice versa.
    let s1 = t.path().join("s1.ckpt");
    let mut a = vec!["train", "--stage", "1", "--data", s(&data), "--ckpt-out", s(&s1)];
    a.extend(TINY);
    assert_eq!(code(&ormllm(&a)), 0);
    let o = ormllm(&["eval", "--ckpt", s(&s1), "--data", s(&data), "--report", s(&t.path().join("r.tsv"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_eval_pipeline_and_formats() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "d", "3", "10", "1");
    let s2 = train_both(t.path(), &data);

    // Checkpoint loads and re-saves byte-identically.
    let bytes = std::fs::read(&s2).unwrap();
    let ck = ormllm::checkpoint::Checkpoint::load(&s2).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert_eq!(ck.meta_value("stage"), Some("2"));
    assert_eq!(ck.meta_value("variant"), Some("full"));
    assert_eq!(ck.meta_value("tool"), Some(ormllm::config::TOOL_VERSION));

    let log = std::fs::read_to_string(t.path().join("s2.loss.tsv")).unwrap();
    let header = log.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, ormllm::training::LOSS_LOG_HEADER);
    assert!(log.contains("# config.train.stage2_epochs\t1"));
    let spatial = std::fs::read_to_string(t.path().join("s2.spatial.tsv")).unwrap();
    assert!(spatial.lines().any(|l| l == "step\tdepth_loss\tseg_loss\ttotal\tlr"));

    let report = |tasks: &str, name: &str| -> String {
        let r = t.path().join(name);
        let o = ormllm(&["eval", "--ckpt", s(&s2), "--data", s(&data), "--split", "val", "--tasks", tasks, "--report", s(&r)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(&r).unwrap();
        assert_eq!(String::from_utf8_lossy(&o.stdout), text);
        text
    };
    let rows = |text: &str| -> Vec<String> {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect()
    };
    let qa = report("qa", "qa.tsv");
    assert_eq!(rows(&qa), ["rouge_l", "meteor_simplified", "cider", "em_at_1"]);
    let sgg = report("sgg", "sgg.tsv");
    assert_eq!(rows(&sgg), ["sgg_p", "sgg_r", "sgg_f1"]);
    let both = report("qa,sgg", "both.tsv");
    assert_eq!(both, report("qa,sgg", "again.tsv"));
    assert!(both.contains("# variant\tfull"));
    assert!(both.contains(&format!("# tool\t{}", ormllm::config::TOOL_VERSION)));

    // Threads do not change results.
    let r4 = t.path().join("r4.tsv");
    let o = ormllm(&["--threads", "4", "eval", "--ckpt", s(&s2), "--data", s(&data), "--split", "val", "--report", s(&r4)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&r4).unwrap(), both);

    // A dataset with a different vocabulary is incompatible.
    let mut other = ormllm::scenegen::read_dataset(&data).unwrap();
    let mut words: Vec<String> = (ormllm::text::RESERVED.len()..other.vocab.len()).map(|i| other.vocab.token(i).unwrap().to_string()).collect();
    words.push("scalpel".into());
    other.vocab = ormllm::text::Vocabulary::from_tokens(words).unwrap();
    let fp = other.vocab.fingerprint();
    for (k, v) in other.meta.iter_mut() {
        if k == "vocab_fingerprint" {
            *v = fp.clone();
        }
    }
    let odir = t.path().join("other");
    ormllm::scenegen::write_dataset(&other, &odir).unwrap();
    let o = ormllm(&["eval", "--ckpt", s(&s2), "--data", s(&odir), "--report", s(&t.path().join("x.tsv"))]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ormllm(&["train", "--stage", "2", "--data", s(&odir), "--ckpt-in", s(&t.path().join("s1.ckpt")), "--ckpt-out", s(&t.path().join("y"))]);
    assert_eq!(code(&o), 5);
}

#[test]
fn ablate_reports_share_one_schema() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "d", "4", "10", "1");
    let out = t.path().join("ab");
    let mut a = vec!["ablate", "--variant", "all", "--data", s(&data), "--out", s(&out), "--split", "val"];
    a.extend(TINY);
    let o = ormllm(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.tsv")).unwrap();
    let body: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 8);
    let mut schema = None;
    for v in ormllm::fusion::Variant::ALL {
        assert!(body.iter().any(|l| l.starts_with(&format!("{}\t", v.name()))));
        let r = std::fs::read_to_string(out.join(v.name()).join("report.tsv")).unwrap();
        assert!(r.contains(&format!("# variant\t{}", v.name())));
        let keys: Vec<String> = r.lines().filter(|l| !l.starts_with('#')).map(|l| l.split('\t').next().unwrap().to_string()).collect();
        match &schema {
            None => schema = Some(keys),
            Some(s) => assert_eq!(s, &keys),
        }
    }
}

#[test]
fn ablate_full_matches_train_then_eval() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "d", "5", "10", "1");
    let s2 = train_both(t.path(), &data);
    let r = t.path().join("r.tsv");
    let o = ormllm(&["eval", "--ckpt", s(&s2), "--data", s(&data), "--report", s(&r)]);
    assert_eq!(code(&o), 0);
    let out = t.path().join("ab");
    let s1 = t.path().join("s1.ckpt");
    let mut a = vec!["ablate", "--variant", "full", "--data", s(&data), "--out", s(&out), "--ckpt-in", s(&s1)];
    a.extend(TINY);
    assert_eq!(code(&ormllm(&a)), 0);
    assert_eq!(std::fs::read(out.join("full/stage2.ckpt")).unwrap(), std::fs::read(&s2).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("full/report.tsv")).unwrap(), std::fs::read_to_string(&r).unwrap());
}

#[test]
fn gradcheck_passes_and_catches_a_bad_adjoint() {
    let o = ormllm(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    for loss in ["depth_loss", "seg_loss", "answer_loss", "contrastive_loss", "stage2_loss"] {
        assert!(out.lines().any(|l| l.starts_with(loss) && l.ends_with("pass")), "{loss}");
    }
    let o = ormllm(&["gradcheck", "--corrupt-adjoint"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("depth_loss") && err.contains("vfm."), "{err}");
}
