use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forecite::corpus::Subset;
use forecite::scaling::{grid_csv, reference_grid, select_points, ScalingFit};
use serde_json::{json, Value};
use tempfile::TempDir;

fn forecite(args: &[&str]) -> Output {
    forecite_env(args, &[])
}

fn forecite_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_forecite"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 60-document corpus and a config for a very small model.
fn setup(extra: Value) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let o = forecite(&["synth", "--n", "60", "--seed", "3", "--out", p(&corpus)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let phase = json!({"learning_rate": 0.01, "weight_decay": 0.01, "grad_accum_steps": 1, "batch_size": 8, "epochs": 1, "seed": 1});
    let mut cfg = json!({
        "corpus": "corpus.jsonl",
        "output_dir": "run",
        "model": {"vocab_size": 259, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_seq_len": 96, "init_seed": 1},
        "phase1": phase,
        "phase2": phase,
        "cutoff": "2024-12",
        "split": {"ratio": 0.75, "seed": 2}
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.path().join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (dir, path)
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let o = forecite(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_subcommand_exits_1() {
    assert_eq!(forecite(&[]).status.code(), Some(1));
}

#[test]
fn evaluate_without_checkpoint_names_the_path() {
    let (dir, cfg) = setup(json!({}));
    let o = forecite(&["evaluate", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let expected = dir.path().join("run").join("model.ckpt");
    assert!(stderr(&o).contains(p(&expected)), "{}", stderr(&o));
}

#[test]
fn missing_config_is_a_validation_error() {
    let o = forecite(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/run.json"));
}

#[test]
fn bad_config_values_exit_1() {
    let (_dir, cfg) = setup(json!({"split": {"ratio": 1.5, "seed": 0}}));
    assert_eq!(forecite(&["train", "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let (dir, cfg) = setup(json!({"output_dir": "blocker"}));
    fs::write(dir.path().join("blocker"), "a file, not a directory").unwrap();
    let o = forecite(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn synth_is_reproducible_and_writes_a_manifest() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert!(forecite(&["synth", "--n", "20", "--seed", "9", "--out", p(&a)]).status.success());
    assert!(forecite(&["synth", "--n", "20", "--seed", "9", "--out", p(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m: Value = serde_json::from_slice(&fs::read(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "synth");
    assert!(m["corpus_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn train_then_evaluate_holdout_and_saliency() {
    let (dir, cfg) = setup(json!({"holdout_from": "2019-01"}));
    let run = dir.path().join("run");
    let o = forecite(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = fs::read(run.join("model.ckpt")).unwrap();

    let m: Value = serde_json::from_slice(&fs::read(run.join("train.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["model"]["d_model"], 8);
    for k in ["phase1_test", "phase2_test"] {
        assert!(m["metrics"][k]["r"].is_number(), "{k}");
    }
    assert!(m["loss_trace"]["phase2"].as_array().is_some_and(|t| !t.is_empty()));
    assert!(m["timing"]["wall_clock_secs"].is_number());

    // Same config, same bytes.
    assert!(forecite(&["train", "--config", p(&cfg)]).status.success());
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), ckpt);

    let o = forecite(&["evaluate", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("test |"));
    let metrics: Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["test"]["rho"].is_number());

    let o = forecite(&["holdout", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("holdout.csv")).unwrap();
    assert!(csv.starts_with("month,cumulative_r\n"));
    assert!(csv.lines().count() > 1);

    let o = forecite(&["saliency", "--config", p(&cfg), "--n", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sal = run.join("saliency");
    let htmls = fs::read_dir(&sal)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "html"))
        .count();
    assert_eq!(htmls, 2);
    let summary = fs::read_to_string(sal.join("summary.csv")).unwrap();
    assert!(summary.contains(",abstract,"));
}

#[test]
fn holdout_requires_a_holdout_month() {
    let (_dir, cfg) = setup(json!({}));
    assert!(forecite(&["train", "--config", p(&cfg)]).status.success());
    assert_eq!(forecite(&["holdout", "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn saliency_rejects_unknown_document() {
    let (_dir, cfg) = setup(json!({}));
    assert!(forecite(&["train", "--config", p(&cfg)]).status.success());
    let o = forecite(&["saliency", "--config", p(&cfg), "--doc", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_writes_metrics_under_its_own_directory() {
    let (dir, cfg) = setup(json!({"fine_tune": false}));
    let o = forecite(&["ablate", "--config", p(&cfg), "--drop", "title"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&fs::read(dir.path().join("run/ablate_title/metrics.json")).unwrap()).unwrap();
    assert!(r["r"].is_number());
    assert_eq!(forecite(&["ablate", "--config", p(&cfg), "--drop", "body"]).status.code(), Some(1));
}

#[test]
fn grid_emits_ten_points_per_cell() {
    let model = json!({"vocab_size": 259, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_seq_len": 64, "init_seed": 1});
    let (dir, cfg) = setup(json!({
        "fine_tune": false,
        "grid": {"models": [model], "fractions": [0.5, 1.0], "subsample_seed": 4}
    }));
    let o = forecite_env(&["grid", "--config", p(&cfg)], &[("FORECITE_WORKERS", "2")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("run/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 10);
    let m: Value = serde_json::from_slice(&fs::read(dir.path().join("run/grid.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["workers"], 2);

    let o = forecite_env(&["grid", "--config", p(&cfg)], &[("FORECITE_WORKERS", "lots")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grid_without_grid_section_exits_1() {
    let (_dir, cfg) = setup(json!({}));
    assert_eq!(forecite(&["grid", "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn fit_scaling_reports_residual_mae() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("table7_test_r.csv");
    fs::write(&grid, grid_csv(&select_points(&reference_grid(), Subset::Test, "r"))).unwrap();
    let out = dir.path().join("fit.json");
    let o = forecite(&["fit-scaling", "--grid", p(&grid), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fit: ScalingFit = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(fit.metric, "r");
    assert!(fit.residual_mae > 0.0 && fit.residual_mae < 0.05);
    assert_eq!(fs::read(&out).unwrap(), o.stdout);
}

#[test]
fn fit_scaling_needs_one_series() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("all.csv");
    fs::write(&grid, grid_csv(&reference_grid())).unwrap();
    assert_eq!(forecite(&["fit-scaling", "--grid", p(&grid)]).status.code(), Some(1));
    let o = forecite(&["fit-scaling", "--grid", p(&grid), "--split", "train", "--metric", "rho"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(forecite(&["fit-scaling", "--grid", "/no/such.csv"]).status.code(), Some(1));
}

#[test]
fn ingest_filters_and_deduplicates() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw.jsonl");
    assert!(forecite(&["synth", "--n", "10", "--seed", "1", "--out", p(&raw)]).status.success());
    let mut text = fs::read_to_string(&raw).unwrap();
    let mut first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    first["id"] = json!("copy");
    text.push_str(&(first.to_string() + "\n"));
    fs::write(&raw, text).unwrap();

    let policy = dir.path().join("policy.json");
    fs::write(&policy, r#"{"min_chars": 50, "max_chars": 100000, "require_abstract": true, "require_body": true, "min_ascii_ratio": 0.9}"#).unwrap();
    let out = dir.path().join("clean.jsonl");
    let o = forecite(&["ingest", "--input", p(&raw), "--out", p(&out), "--policy", p(&policy), "--cutoff", "2024-12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 10);
    assert!(dir.path().join("clean.rejected.csv").is_file());
    assert!(dir.path().join("clean.manifest.json").is_file());
}
