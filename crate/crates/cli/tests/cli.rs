use std::path::Path;
use std::process::{Command, Output};

use adjd_core::config::{parse_config, RunConfig};

const TINY: &str = r#"{"model": {"hidden": [16, 16]}, "train": {"steps": 40, "batch_size": 32},
  "data": {"train_size": 256, "holdout_size": 64}, "classifier": {"hidden": [16], "steps": 40},
  "sample": {"count": 16, "steps": 8}, "gradcheck": {"steps": 8, "theta_coords": 3}}"#;

fn adjd(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adjd"));
    c.args(args).env_remove("ADJD_THREADS").env_remove("RUST_LOG");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("adjd runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn invalid_configs_report_key_paths_and_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"solver": {"kind": "rk9"}}"#);
    let out = dir.path().join("out");
    let v = error_json(&adjd(&["sample", "--config", &bad, "--output", out.to_str().unwrap()], &[]));
    assert_eq!(v["error"], "validation");
    assert_eq!(v["path"], "solver.kind");
    assert!(!out.exists(), "nothing is written for an invalid config");

    let broken = write(dir.path(), "broken.json", "{\"seed\": 1,,}");
    let v = error_json(&adjd(&["sample", "--config", &broken], &[]));
    assert_eq!(v["error"], "parse");
    assert_eq!(v["offset"], 11);

    let missing = dir.path().join("none.json");
    let v = error_json(&adjd(&["sample", "--config", missing.to_str().unwrap()], &[]));
    assert_eq!(v["error"], "io");
}

#[test]
fn usage_and_environment_errors_are_one_line() {
    let out = adjd(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
    let v = error_json(&adjd(&["sample"], &[("ADJD_THREADS", "zero")]));
    assert_eq!(v["error"], "argument");
    assert!(adjd(&["--help"], &[]).status.success());
}

#[test]
fn train_then_sample_with_a_different_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", TINY);
    let run = dir.path().join("train");
    let out = adjd(&["train-denoiser", "--config", &cfg, "--seed", "5", "--output", run.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for p in ["config.json", "metrics.csv", "report.json", "checkpoints/denoiser.adjd", "samples/samples.csv"] {
        assert!(run.join(p).exists(), "{p}");
    }
    let echoed = parse_config(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed.seed, 5);
    assert_eq!(echoed.output_dir, run);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss"));
    assert_eq!(metrics.lines().count(), 41);

    let mut sample_cfg: RunConfig = parse_config(TINY.as_bytes()).unwrap();
    sample_cfg.checkpoints.denoiser = Some(run.join("checkpoints/denoiser.adjd"));
    sample_cfg.schedule = adjd_core::schedule::NoiseSchedule::cosine();
    let cfg2 = write(dir.path(), "sample.json", &sample_cfg.to_json());
    let srun = dir.path().join("sample");
    let out = adjd(&["sample", "--config", &cfg2, "--output", srun.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs from the training schedule"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(srun.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["results"]["schedule_mismatch"], true);
    assert_eq!(report["command"], "sample");
    let samples = std::fs::read_to_string(srun.join("samples/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 17);
}

#[test]
fn failed_gradcheck_exits_nonzero_after_writing_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: RunConfig = parse_config(TINY.as_bytes()).unwrap();
    cfg.gradcheck.tolerance = 1e-15;
    let path = write(dir.path(), "strict.json", &cfg.to_json());
    let run = dir.path().join("gc");
    let out = adjd(&["gradcheck", "--config", &path, "--output", run.to_str().unwrap()], &[("ADJD_THREADS", "1")]);
    let v = error_json(&out);
    assert_eq!(v["path"], "gradcheck.tolerance");
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("target,coordinate,analytic,numeric,rel_err"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["memory"]["O(1)"], true);
    assert_eq!(report["memory"]["O(N)"], true);
}
