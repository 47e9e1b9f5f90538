//! End-to-end checks of the command-line interface.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use patchassoc::harness::{read_heatmap, read_pgm};
use patchassoc::model::ModelParams;

fn run(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_patchassoc"));
    c.arg(cmd).arg("--out").arg(out).arg("--seed").arg("5");
    for s in extra {
        c.arg("--set").arg(s);
    }
    c.output().expect("binary runs")
}

const SMALL: &[&str] = &[
    "distribution.d=16",
    "distribution.grid_rows=4",
    "distribution.grid_cols=6",
    "distribution.block_rows=2",
    "distribution.block_cols=3",
    "train.n=256",
    "train.steps=10",
    "train.test_samples=100",
    "train.eval_every=5",
    "train.checkpoint_every=5",
];

#[test]
fn gradcheck_defaults_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_patchassoc"))
        .args(["gradcheck", "--assert", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["report"]["max_rel_err"].as_f64().unwrap() < 1e-6);
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run("train", out, SMALL);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "metrics.csv",
        "attention.csv",
        "attention.pgm",
        "attention.pgm.json",
        "target_mask.pgm",
        "params.txt",
        "checkpoint_000000.txt",
        "checkpoint_000005.txt",
        "checkpoint_000010.txt",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,train_loss,test_accuracy,"));
    assert_eq!(metrics.lines().count(), 4);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["steps"], 10);

    let params = ModelParams::read_from(fs::read(a.join("params.txt")).unwrap().as_slice()).unwrap();
    let heat = read_heatmap(&a.join("attention.pgm")).unwrap();
    let (lo, hi) = params.a.min_max();
    for (x, y) in params.a.as_slice().iter().zip(heat.as_slice()) {
        assert!((x - y).abs() <= (hi - lo) / 255.0 * (1.0 + 1e-9));
    }
    let mask = read_pgm(&a.join("target_mask.pgm")).unwrap();
    assert_eq!(mask.as_slice().iter().filter(|&&p| p == 255.0).count(), 24 * 6);

    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(resolved.contains("train.steps = 10"));
    let run_meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_meta["master_seed"], 5);
}

#[test]
fn bad_config_reports_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "# comment\nseed = 3\nmodel.tau = abc\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_patchassoc"))
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("model.tau"), "{err}");

    let o = run("train", &dir.path().join("out"), &["train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.nonsense"));
}

#[test]
fn divergence_exits_three_with_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = SMALL.to_vec();
    sets.extend(["train.eta=1e9", "model.tau=1", "train.omega=0.5", "train.steps=50"]);
    let o = run("train", dir.path(), &sets);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn failing_gate_exits_four_only_with_assert() {
    let dir = tempfile::tempdir().unwrap();
    let sets = ["check.spurious_beta=1e-7", "check.spurious_samples=300"];
    let o = run("spurious", dir.path(), &sets);
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_patchassoc"))
        .args(["spurious", "--assert", "--set", sets[0], "--set", sets[1], "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gate failed"));
}

#[test]
fn idealized_writes_trajectory_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "idealized",
        dir.path(),
        &["idealized.steps=2000", "idealized.record_every=100"],
    );
    assert_eq!(o.status.code(), Some(0));
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,alpha,gamma,rho,Lambda,Gamma,Xi,G"));
    let events: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("events.json")).unwrap()).unwrap();
    assert!(events["events"]["t0"].as_u64().is_some());
}

#[test]
fn generate_data_roundtrips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("generate-data", dir.path(), SMALL);
    assert_eq!(o.status.code(), Some(0));
    let train =
        patchassoc::distribution::Dataset::read_from(fs::read(dir.path().join("train.dataset")).unwrap().as_slice())
            .unwrap();
    assert_eq!(train.len(), 256);
    assert_eq!(train.points[0].x.len(), 16 * 24);
}
