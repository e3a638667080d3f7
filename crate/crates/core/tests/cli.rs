use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mtlue");

fn mtlue(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env("MTLUE_THREADS", "1").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const TINY: &str = r#"{
  "dataset": {"kind": "classification", "class_counts": [2, 2], "n_train": 32, "n_test": 16, "channels": 1, "height": 8, "width": 8},
  "attack": {"method": "classwise-patch"},
  "victims": {"mtl": ["ls"], "stl": false, "arch": {"encoder": [{"width": 4, "stride": 2}]}, "train": {"epochs": 1, "batch": 16}},
  "seed": 3
}"#;

#[test]
fn unknown_subcommand_and_flag_exit_1_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mtlue(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = mtlue(&["eval", "--nope"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn validation_and_parse_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", r#"{"attack": {"epsilon": -1}}"#);
    let o = mtlue(&["craft", "--config", &bad], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains('ε'));
    let broken = write(tmp.path(), "broken.json", "{\n  \"seed\": 1,\n  \"mix_ratio\": oops\n}");
    let o = mtlue(&["eval", "--config", &broken], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("column"), "{err}");
    assert!(!tmp.path().join("runs").exists(), "no run directory for rejected configs");
}

#[test]
fn runtime_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"dataset": {"kind": "path", "path": "does-not-exist"}}"#);
    assert_eq!(mtlue(&["gen-data", "--config", &cfg], tmp.path()).status.code(), Some(2));
    assert_eq!(mtlue(&["report", "missing.json"], tmp.path()).status.code(), Some(2));
}

#[test]
fn runs_are_append_only_with_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    for _ in 0..2 {
        let o = mtlue(&["eval", "--config", &cfg, "--out", "out"], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut dirs: Vec<_> = std::fs::read_dir(tmp.path().join("out")).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    assert_eq!(dirs.len(), 2);
    assert!(dirs[0].file_name().unwrap().to_string_lossy().ends_with("-s3-0"));
    assert!(dirs[1].file_name().unwrap().to_string_lossy().ends_with("-s3-1"));
    for d in &dirs {
        let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        assert_eq!(run["config_hash"], report["config_hash"]);
        assert_eq!(run["seed"], 3);
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("perturbations/deltas.json")).unwrap()).unwrap();
        assert_eq!(side["config_hash"], report["config_hash"]);
        let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("victims/mtl-ls/model.json")).unwrap()).unwrap();
        assert_eq!(model["seed"], 3);
    }
    let o = mtlue(&["report", dirs[0].to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("classwise-patch"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let o = mtlue(&["craft", "--config", &cfg, "--seed", "11", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let d = std::fs::read_dir(tmp.path().join("o")).unwrap().next().unwrap().unwrap().path();
    assert!(d.file_name().unwrap().to_string_lossy().contains("-s11-"));
    assert!(d.join("deltas.json").exists() && d.join("attack.json").exists());
}

#[test]
fn pipeline_commands_chain_through_saved_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    assert_eq!(mtlue(&["gen-data", "--config", &cfg, "--out", "data"], tmp.path()).status.code(), Some(0));
    assert_eq!(mtlue(&["poison", "--config", &cfg, "--out", "poisoned"], tmp.path()).status.code(), Some(0));
    let poisoned = std::fs::read_dir(tmp.path().join("poisoned")).unwrap().next().unwrap().unwrap().path();
    assert!(poisoned.join("manifest.json").exists());
    let train_cfg = TINY.replace(
        r#""dataset": {"kind": "classification", "class_counts": [2, 2], "n_train": 32, "n_test": 16, "channels": 1, "height": 8, "width": 8}"#,
        &format!(r#""dataset": {{"kind": "path", "path": {:?}}}"#, poisoned.to_str().unwrap()),
    );
    let cfg2 = write(tmp.path(), "c2.json", &train_cfg);
    let o = mtlue(&["train", "--config", &cfg2, "--out", "train"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mtl-ls"));
}

#[test]
fn thread_variable_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(BIN).args(["gradcheck"]).current_dir(tmp.path()).env("MTLUE_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
