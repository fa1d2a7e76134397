use std::path::Path;
use std::process::{Command, Output};

fn scorefp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scorefp")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scorefp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, kind: &str) -> String {
    let path = dir.join(format!("{kind}.json"));
    let cfg = format!(
        r#"{{
  "problem": {{"kind": "{kind}", "dim": 3, "seed": 1}},
  "method": "sm",
  "train": {{"epochs": 6, "batch_size": 16, "hidden": [8], "validate_every": 3, "validation_size": 16, "seeds": [0, 1]}},
  "test_size": 40,
  "mc_samples": 500,
  "record_rate": false
}}"#
    );
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn two_stage_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou");
    let score = dir.path().join("score.json");
    let ll = dir.path().join("ll.json");
    let s = score.to_str().unwrap();
    let l = ll.to_str().unwrap();
    ok(&["train-score", "--config", &cfg, "--method", "score-pinn", "--trace", "hutchinson", "--out", s]);
    assert!(dir.path().join("score.json.log.csv").exists());
    ok(&["train-ll", "--config", &cfg, "--score", s, "--out", l]);
    let table = ok(&["eval", "--config", &cfg, "--ll", l]);
    assert!(table.starts_with("method,d,seed,ll_l2,ll_linf,pdf_l2,pdf_linf,rate,epochs\n"));
    assert_eq!(table.lines().count(), 2);
    let samples = dir.path().join("x.csv");
    ok(&["sample", "--config", &cfg, "--score", s, "--n", "20", "--steps", "10", "--out", samples.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(&samples).unwrap().lines().count(), 21);
}

#[test]
fn run_writes_seed_rows_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou");
    let out = dir.path().join("r.json");
    ok(&["run", "--config", &cfg, "--method", "ssm", "--out", out.to_str().unwrap()]);
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert_eq!(rows[2]["seed"], "mean");
    assert_eq!(rows[0]["method"], "ssm");
}

#[test]
fn monte_carlo_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou-laplace");
    let out = dir.path().join("ref.json");
    ok(&["mc-reference", "--config", &cfg, "--samples", "1000", "--out", out.to_str().unwrap()]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["ll"].as_array().unwrap().len(), 40);
    let report = ok(&["convolution-bench", "--kind", "gaussian", "--dim", "3", "--samples", "20000"]);
    let r: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(r["ll_l2"].as_f64().unwrap() < 1e-2);
}

#[test]
fn failures_exit_nonzero_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "varying-eigenspace");
    let out = scorefp(&["train-score", "--config", &cfg, "--out", dir.path().join("s.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[capability]"));
    let missing = scorefp(&["run", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error[io]"));
    assert_ne!(missing.status.code(), Some(0));
    let bad = scorefp(&["run", "--method", "pinn"]);
    assert!(!bad.status.success());
}
