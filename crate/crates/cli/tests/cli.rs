use std::path::Path;
use std::process::{Command, Output};

use wspace_core::config::Config;

fn wspace(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wspace"))
        .args(args)
        .arg(format!("--workdir={}", workdir.display()))
        .env_remove("WSPACE_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn config_prints_the_effective_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wspace"))
        .args(["config", "--optim.lambda3", "0", "--guided.similarity=learned:/x.ckpt"])
        .env_remove("WSPACE_CONFIG")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = Config::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.optim.lambda3, 0.0);
    assert_eq!(cfg.guided.similarity, "learned:/x.ckpt");
}

#[test]
fn repository_config_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../wspace.toml");
    assert_eq!(Config::load(&path).unwrap(), Config::default());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["config", "--optim.nope", "1"][..],
        &["config", "--optim.iterations", "0"],
        &["edit", "--text", "x"],
        &["generate"],
        &["config", "--optim.lambda3"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_wspace")).args(args).env_remove("WSPACE_CONFIG").current_dir(dir.path()).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_models_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = wspace(dir.path(), &["generate", "--text", "a person"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing model"));
}

#[test]
fn dataset_build_writes_data_and_a_run_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = wspace(dir.path(), &["dataset", "build", "--dataset.size", "12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("dataset/manifest.json").exists());
    assert!(dir.path().join("dataset/images/00011.png").exists());
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().flatten().collect();
    assert_eq!(runs.len(), 1);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(runs[0].path()).unwrap()).unwrap();
    assert_eq!(m["command"], "dataset build");
    assert_eq!(m["config"]["dataset"]["size"], 12);
    assert!(m["outputs"]["dataset"].as_str().unwrap().len() == 64);
}
