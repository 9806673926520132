use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn empower(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_empower")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

/// A ball-in-box run small enough for a smoke test.
fn tiny_ball(iterations: usize) -> Value {
    json!({
        "schema_version": 1,
        "environment": {"name": "ball_in_box"},
        "channel": {"horizon": 3, "epochs": 2},
        "policy": {"iterations": iterations, "episodes": 2, "eval": {"episodes": 2}},
        "seed": 5
    })
}

#[test]
fn every_preset_parses() {
    let mut n = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        empower_core::config::RunConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 7);
}

#[test]
fn oracle_check_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = empower(&["oracle-check", "--suite", "waterfill", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("oracle-waterfill.json")).unwrap()).unwrap();
    assert_eq!(report["instances"], 200);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "oracle-check");
}

#[test]
fn analytic_landscape_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("pendulum-analytic.json");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = empower(&[
            "landscape",
            "--config",
            cfg.to_str().unwrap(),
            "--source",
            "analytic",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((fs::read(out.join("landscape.csv")).unwrap(), fs::read(out.join("manifest.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 61 * 61);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(
        dir.path(),
        "gamma.json",
        &json!({"schema_version": 1, "environment": {"name": "pendulum"}, "policy": {"gamma": 1.5}}),
    );
    let o = empower(&["train", "--config", &bad, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));

    let tunnel = configs().join("tunnel-beta-0.json");
    let o = empower(&[
        "safety",
        "--config",
        tunnel.to_str().unwrap(),
        "--beta",
        "-1",
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);

    let o = empower(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let ball = configs().join("ball-in-box.json");
    let o = empower(&[
        "landscape",
        "--config",
        ball.to_str().unwrap(),
        "--source",
        "analytic",
        "--out",
        dir.path().join("l").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "analytic matrices exist only for the pendulum");
}

#[test]
fn missing_model_is_an_artifact_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("ball-in-box.json");
    let o = empower(&[
        "landscape",
        "--config",
        cfg.to_str().unwrap(),
        "--source",
        "learned",
        "--model",
        dir.path().join("nope.params").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_smoke_run_then_resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let one = write_config(dir.path(), "one.json", &tiny_ball(1));
    let two = write_config(dir.path(), "two.json", &tiny_ball(2));
    let resumed = dir.path().join("resumed");
    let straight = dir.path().join("straight");

    let t = Instant::now();
    let o = empower(&["train", "--config", &one, "--out", resumed.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t.elapsed() < Duration::from_secs(60));
    for f in ["config.json", "metrics.csv", "checkpoint.params", "policy.params", "channel.params", "eval.json", "manifest.json"] {
        assert!(resumed.join(f).exists(), "{f}");
    }

    let o = empower(&["train", "--config", &two, "--resume", "--out", resumed.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = empower(&["train", "--config", &two, "--out", straight.to_str().unwrap()]);
    assert_eq!(code(&o), 0);

    let metrics = fs::read_to_string(resumed.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(metrics, fs::read_to_string(straight.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(resumed.join("policy.params")).unwrap(), fs::read(straight.join("policy.params")).unwrap());

    // A saved policy can be evaluated on its own.
    let o = empower(&["eval", "--config", &two, "--out", straight.to_str().unwrap(), "--episodes", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval: Value = serde_json::from_str(&fs::read_to_string(straight.join("eval.json")).unwrap()).unwrap();
    assert!(eval.to_string().contains("final_distance"));
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let one = write_config(dir.path(), "one.json", &tiny_ball(1));
    assert_eq!(code(&empower(&["train", "--config", &one, "--out", out.to_str().unwrap()])), 0);
    let mut other = tiny_ball(2);
    other["policy"]["gamma"] = json!(0.9);
    let other = write_config(dir.path(), "other.json", &other);
    let o = empower(&["train", "--config", &other, "--resume", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn failed_run_leaves_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    fs::create_dir_all(out.join("metrics.csv/blocker")).unwrap();
    let cfg = write_config(dir.path(), "one.json", &tiny_ball(1));
    let o = empower(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let marker = fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(marker.starts_with("iteration 0"), "{marker}");
}

#[test]
fn safety_reports_route_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(configs().join("tunnel-beta-800.json")).unwrap()).unwrap();
    cfg["policy"]["iterations"] = json!(1);
    cfg["policy"]["episodes"] = json!(2);
    let path = write_config(dir.path(), "t.json", &cfg);
    let out = dir.path().join("o");
    let o = empower(&["safety", "--config", &path, "--beta", "0.00125", "--episodes", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let routes = fs::read_to_string(out.join("routes.csv")).unwrap();
    let mut lines = routes.lines();
    assert_eq!(lines.next().unwrap(), "beta,middle_fraction,right_fraction,neither_fraction,goal_rate");
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 0.00125);
    assert!((row[1] + row[2] + row[3] - 1.0).abs() < 1e-12);
    assert!(out.join("eval_trajectories.csv").exists());
}
