//! End-to-end tests for the `hmarl` binary: exit codes, artifact layout,
//! determinism of generated cohorts, and a miniature
//! generate -> train -> evaluate -> recommend pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hmarl::features::FeatureSchema;
use hmarl::simulator::DynamicsConfig;
use hmarl::training::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmarl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn hmarl")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_dynamics(dir: &Path) -> PathBuf {
    let mut cfg = DynamicsConfig::default();
    cfg.horizon = 8;
    let path = dir.join("dynamics.json");
    cfg.save(&path).unwrap();
    path
}

fn tiny_train_config(dir: &Path) -> PathBuf {
    let mut cfg = TrainConfig::default();
    cfg.k = 4;
    cfg.hidden = vec![8];
    cfg.epochs = 1;
    cfg.batch_size = 16;
    let path = dir.join("train.json");
    cfg.save(&path).unwrap();
    path
}

fn generate_small(data: &Path, config: &Path) {
    let out = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--train-patients",
        "16",
        "--test-patients",
        "8",
        "--external-patients",
        "8",
    ]);
    assert_success(&out, "generate");
}

fn artifact_hashes(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    manifest["artifact_sha256"].clone()
}

#[test]
fn missing_config_exits_with_usage_error() {
    let out = run(&["generate", "--config", "/nonexistent/cfg.json", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_model_kind_exits_with_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dynamics(tmp.path());
    let data = tmp.path().join("data");
    generate_small(&data, &config);
    let out = run(&[
        "train",
        "--model",
        "galaxy-brain",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("model").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("proposed"), "stderr should list valid kinds: {stderr}");
    assert!(stderr.contains("qmix-t"));
}

#[test]
fn generate_writes_cohorts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dynamics(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    generate_small(&a, &config);
    generate_small(&b, &config);
    for name in ["train", "test", "external"] {
        assert!(a.join(format!("{name}.json")).exists());
        assert!(a.join(format!("{name}.bin")).exists());
    }
    assert!(a.join("constants.json").exists());
    assert!(a.join("dynamics_external.json").exists());
    assert_eq!(artifact_hashes(&a), artifact_hashes(&b), "same seed must give identical cohorts");
}

#[test]
fn pipeline_hierarchy_train_evaluate_recommend() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dynamics(tmp.path());
    let data = tmp.path().join("data");
    generate_small(&data, &config);
    let train_cfg = tiny_train_config(tmp.path());
    let model = tmp.path().join("model");
    let out = run(&[
        "train",
        "--model",
        "proposed",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--config",
        train_cfg.to_str().unwrap(),
    ]);
    assert_success(&out, "train proposed");
    assert!(model.join("hierarchy.json").exists());
    assert!(model.join("run.json").exists());
    assert!(model.join("train_config.json").exists());

    let eval = tmp.path().join("eval");
    let out = run(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
        "--datasets",
        "test",
    ]);
    assert_success(&out, "evaluate");
    assert!(eval.join("test/report.json").exists());
    assert!(eval.join("test/curves/mortality_vs_return.csv").exists());
    assert!(eval.join("summary.json").exists());

    // Current observation plus two history rows, already normalized.
    let d = FeatureSchema::synthetic_default().d();
    let row = vec!["0.1"; d].join(",");
    let state = tmp.path().join("state.csv");
    std::fs::write(&state, format!("{row}\n{row}\n{row}\n")).unwrap();
    let out = run(&[
        "recommend",
        "--model",
        model.to_str().unwrap(),
        "--state",
        state.to_str().unwrap(),
    ]);
    assert_success(&out, "recommend");
    let reply: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let levels = reply["action"]["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 6);
    assert_eq!(reply["root_q"].as_array().unwrap().len(), 5);
    assert!(!reply["trace"].as_array().unwrap().is_empty());
    // Diuretics and dialysis are never recommended together.
    assert!(levels[4].as_u64().unwrap() == 0 || levels[5].as_u64().unwrap() == 0);
}

#[test]
fn pipeline_baseline_train_and_recommend() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dynamics(tmp.path());
    let data = tmp.path().join("data");
    generate_small(&data, &config);
    let train_cfg = tiny_train_config(tmp.path());
    let model = tmp.path().join("model");
    let out = run(&[
        "train",
        "--model",
        "d3qn-o",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--config",
        train_cfg.to_str().unwrap(),
    ]);
    assert_success(&out, "train d3qn-o");
    assert!(model.join("baseline.json").exists());

    let d = FeatureSchema::synthetic_default().d();
    let state = tmp.path().join("state.csv");
    std::fs::write(&state, vec!["0.0"; d].join(",") + "\n").unwrap();
    let out = run(&[
        "recommend",
        "--model",
        model.to_str().unwrap(),
        "--state",
        state.to_str().unwrap(),
    ]);
    assert_success(&out, "recommend baseline");
    let reply: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reply["action"]["levels"].as_array().unwrap().len(), 6);
}

#[test]
fn ablation_flags_recorded_in_saved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dynamics(tmp.path());
    let data = tmp.path().join("data");
    generate_small(&data, &config);
    let train_cfg = tiny_train_config(tmp.path());
    let model = tmp.path().join("model");
    let out = run(&[
        "train",
        "--model",
        "prop-noc",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--config",
        train_cfg.to_str().unwrap(),
    ]);
    assert_success(&out, "train prop-noc");
    let saved = TrainConfig::load(&model.join("train_config.json")).unwrap();
    assert!(saved.no_communication);
    assert!(!saved.no_state_repr);
    let kind: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("model_kind.json")).unwrap())
            .unwrap();
    assert_eq!(kind["kind"], "prop-noc");
}
