use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fbsde_cli::{LOG_FILE, SNAPSHOT_FILE, SUMMARY_FILE};
use fbsde_core::config::ExperimentConfig;

fn fbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde")).args(args).env_remove("FBSDE_OUTPUT_DIR").output().expect("run fbsde")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn exported(dir: &Path, preset: &str) -> PathBuf {
    let path = dir.join(format!("{preset}.json"));
    let out = fbsde(&["export-config", "--preset", preset, "--out", s(&path)]);
    assert!(out.status.success());
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn exported_presets_reload_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["cartpole", "biped", "lq_toy"] {
        let path = exported(dir.path(), preset);
        let loaded = ExperimentConfig::load(&path, &[]).unwrap();
        assert_eq!(loaded, ExperimentConfig::preset(preset).unwrap());
    }
}

#[test]
fn train_writes_artifacts_and_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = exported(dir.path(), "lq_toy");
    let out = dir.path().join("run");
    let o = fbsde(&["train", "--config", s(&cfg), "--set", "N_I=7", "--set", "train.seed=11", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [SNAPSHOT_FILE, LOG_FILE, SUMMARY_FILE, "checkpoint.json", "checkpoint.bin", "train_timing.jsonl", "k_changes.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let snap = ExperimentConfig::load(&out.join(SNAPSHOT_FILE), &[]).unwrap();
    assert_eq!(snap.train.iterations, 7);
    assert_eq!(snap.train.seed, 11);
    let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(!log.contains("wall"));
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = exported(dir.path(), "lq_toy");
    let from_env = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(["train", "--config", s(&cfg), "--set", "N_I=1"])
        .env("FBSDE_OUTPUT_DIR", &from_env)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(from_env.join(LOG_FILE).exists());

    let flag = dir.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(["train", "--config", s(&cfg), "--set", "N_I=1", "--out", s(&flag)])
        .env("FBSDE_OUTPUT_DIR", &from_env)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag.join(LOG_FILE).exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = exported(dir.path(), "lq_toy");
    let out = dir.path().join("run");

    let o = fbsde(&["train", "--config", s(&cfg), "--set", "bogus=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    let o = fbsde(&["train", "--config", s(&cfg), "--set", "train.dt=-1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    let o = fbsde(&["train", "--config", s(&missing), "--out", s(&out)]);
    assert_ne!(o.status.code(), Some(0));

    let o = fbsde(&["train", "--config", s(&cfg), "--set", "N_I=3", "--set", "env.noise_scale=1e200", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("aborted"));

    let o = fbsde(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("nothing"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn eval_with_a_mismatched_network_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = exported(dir.path(), "lq_toy");
    let out = dir.path().join("run");
    assert!(fbsde(&["train", "--config", s(&cfg), "--set", "N_I=1", "--out", s(&out)]).status.success());
    let o = fbsde(&["eval", "--config", s(&cfg), "--set", "net.lstm=[8]", "--out", s(&out), "--latency-calls", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn eval_exports_one_row_per_state_with_consistent_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = exported(dir.path(), "cartpole");
    let out = dir.path().join("run");
    let sets = ["--set", "N_I=2", "--set", "M=4", "--set", "N=30"];
    let o = fbsde(&[&["train", "--config", s(&cfg)], &sets[..], &["--out", s(&out)]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fbsde(&[&["eval", "--config", s(&cfg)], &sets[..], &["--out", s(&out), "--trials", "5", "--latency-calls", "20"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["stats"]["trials"], 5);
    assert_eq!(metrics["latency"]["calls"], 20);

    let spec = ExperimentConfig::preset("cartpole").unwrap().penalty;
    let text = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.last(), Some(&"violation_flag"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let diverged = metrics["stats"]["diverged"].as_u64().unwrap() as usize;
    assert_eq!(rows.len(), (5 - diverged) * 31);
    for r in &rows {
        let x: Vec<f64> = r[3..7].iter().map(|v| v.parse().unwrap()).collect();
        let flag = u8::from(!spec.satisfied(&x)).to_string();
        assert_eq!(r[r.len() - 1], flag);
    }
}

#[test]
fn penalty_plot_and_gradcheck_commands() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let o = fbsde(&["penalty-plot", "--out", s(&csv), "--k", "1,3", "--samples", "11"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 22);

    let o = fbsde(&["gradcheck", "--lstm-only"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = fbsde(&["gradcheck", "--lstm-only", "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn untrained_walk_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = exported(dir.path(), "biped");
    let out = dir.path().join("walk");
    let o = fbsde(&["walk", "--config", s(&cfg), "--untrained", "--footsteps", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("walk_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["footsteps_completed"], 2);
    let trace = std::fs::read_to_string(out.join("walk.csv")).unwrap();
    assert!(trace.starts_with("footstep,member,step,t,"));
}
