use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use m2v_core::probe::MetricReport;
use serde_json::Value;

fn m2v(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2v")).args(args).env_remove("M2V_SEED").env("RUST_LOG", "warn").output().unwrap()
}

fn diagnostic(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().expect("a diagnostic line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON: {line} ({e})"))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--set", "corpus.n_clips=48",
    "--set", "corpus.duration_s=5.0",
    "--set", "train.crop_seconds=1.0",
    "--set", "train.batch_audio_budget_seconds=2.0",
    "--set", "probe.max_epochs=60",
];

#[test]
fn missing_config_is_a_usage_error() {
    let out = m2v(&["pretrain", "--config", "missing.json", "--corpus", "x", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(diagnostic(&out)["error"], "usage");
}

#[test]
fn unknown_keys_and_subcommands_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = m2v(&["pretrain", "--corpus", "x", "--out", path(dir.path()), "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(diagnostic(&out)["message"].as_str().unwrap().contains("train.bogus"));

    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"lr": 0.001, "typo": 3}}"#).unwrap();
    let out = m2v(&["pretrain", "--corpus", "x", "--out", path(dir.path()), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(m2v(&["transcode"]).status.code(), Some(1));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = m2v(&["pretrain", "--corpus", path(&dir.path().join("none")), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(diagnostic(&out)["code"], 2);
}

#[test]
fn help_lists_every_key_with_its_default() {
    let out = m2v(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["corpus.n_clips", "train.crop_seconds", "train.mask.span_length", "train.ema.tau_end", "train.encoder.hidden", "probe.l2_grid"] {
        assert!(text.contains(key), "{key} missing from --help");
    }
    assert!(text.contains("train.total_steps") && text.contains("2000"));
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let out = m2v(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    for op in ["linear", "attention", "conv1d", "smooth_l1", "desk_encoder"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.contains("max_rel_error")), "{op}");
    }
}

#[test]
fn seed_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_m2v"))
        .args(["pretrain", "--corpus", path(&dir.path().join("none")), "--out", path(dir.path())])
        .env("M2V_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let resolved: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("logs/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], 17);
    assert_eq!(resolved["corpus"]["seed"], 17);
}

/// synth → pretrain → extract → probe on a tiny corpus, twice, with
/// byte-identical artifacts.
#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let mut a: Vec<&str> = vec!["synth", "--out", path(&corpus)];
    a.extend(TINY);
    assert_eq!(m2v(&a).status.code(), Some(0));
    assert!(corpus.join("train.jsonl").is_file());

    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["pretrain", "--threads", "1", "--corpus", path(&corpus), "--out", path(&out), "--set", "train.total_steps=4", "--set", "train.checkpoint_every=2"];
        args.extend(TINY);
        let o = m2v(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let ck = out.join("checkpoints/step_000004.m2v");
        let mut args = vec!["extract", "--threads", "1", "--checkpoint", path(&ck), "--corpus", path(&corpus), "--out", path(&out)];
        args.extend(TINY);
        assert_eq!(m2v(&args).status.code(), Some(0));
        let mut args = vec!["probe", "--threads", "1", "--checkpoint", path(&out), "--corpus", path(&corpus), "--out", path(&out)];
        args.extend(TINY);
        let o = m2v(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (x, y) = (run("x"), run("y"));
    for f in ["checkpoints/step_000002.m2v", "checkpoints/step_000004.m2v", "logs/metrics.jsonl", "features/conv.m2vf", "features/layer2.m2vf", "features/mean_top1.m2vf"] {
        assert!(fs::read(x.join(f)).unwrap() == fs::read(y.join(f)).unwrap(), "{f} differs");
    }
    let unlabeled = |dir: &Path| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(dir.join("reports/probe.json")).unwrap()).unwrap();
        v[0]["label"] = Value::Null;
        v
    };
    assert_eq!(unlabeled(&x), unlabeled(&y));
    let reports: Vec<MetricReport> = serde_json::from_str(&fs::read_to_string(x.join("reports/probe.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].label, "x");
    let raw: Value = serde_json::from_str(&fs::read_to_string(x.join("reports/probe.json")).unwrap()).unwrap();
    assert!(raw[0]["best"]["genre"]["accuracy"].is_number());
}

#[test]
fn grid_emits_eleven_runs_and_one_table() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let mut a: Vec<&str> = vec!["synth", "--out", path(&corpus)];
    a.extend(TINY);
    assert_eq!(m2v(&a).status.code(), Some(0));
    let out = dir.path().join("grid");
    let mut args = vec!["grid", "--threads", "1", "--parallel", "2", "--corpus", path(&corpus), "--out", path(&out), "--set", "train.total_steps=1"];
    args.extend(TINY);
    args.extend(["--set", "train.crop_seconds=3.0", "--set", "train.batch_audio_budget_seconds=6.0"]);
    let o = m2v(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table: Vec<MetricReport> = serde_json::from_str(&fs::read_to_string(out.join("reports/grid_table.json")).unwrap()).unwrap();
    let labels: Vec<&str> = table.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels.len(), 11);
    assert_eq!(labels[0], "Starting Setting");
    assert_eq!(labels[10], "Step 800K");
    assert!(out.join("runs/step800k/checkpoints/step_000002.m2v").is_file());

    // Probing the grid directory reproduces the same table.
    let mut args = vec!["probe", "--threads", "1", "--checkpoint", path(&out), "--corpus", path(&corpus), "--out", path(&out)];
    args.extend(TINY);
    assert_eq!(m2v(&args).status.code(), Some(0));
    assert!(fs::read(out.join("reports/probe.json")).unwrap() == fs::read(out.join("reports/grid_table.json")).unwrap());
    let text = fs::read_to_string(out.join("reports/probe.txt")).unwrap();
    assert_eq!(text.lines().count(), 12);
}
