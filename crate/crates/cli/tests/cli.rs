use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

mod common;
use common::small_configs;

fn sciml(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sciml"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCIML_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    p
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn every_subcommand_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, params) in small_configs() {
        let cfg = write_config(tmp.path(), &format!("{cmd}.json"), &json!({"seed": 3, "precision": 10, "params": params}));
        let mut runs = Vec::new();
        for k in 0..2 {
            let out = tmp.path().join(format!("{cmd}-{k}"));
            let o = sciml(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], tmp.path());
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
            runs.push(csv_files(&out));
        }
        assert!(!runs[0].is_empty(), "{cmd} wrote no CSV");
        assert_eq!(runs[0], runs[1], "{cmd} output differs between identical runs");
        let m = manifest(&tmp.path().join(format!("{cmd}-0")));
        assert_eq!(m["params"], params, "{cmd} manifest must echo the resolved params");
        assert_eq!(m["seed"], 3);
        assert_eq!(m["status"], "completed");
    }
}

#[test]
fn unknown_subcommand_prints_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sciml(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &json!({"params": {"a": 1.0, "ell": 1.0, "n": 8}}));
    let o = sciml(&["solve-fd", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kappa"));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let nested = json!({"params": {"lr": 0.4, "lr_schedule": "constant", "steps": 10, "start": [0.0, 0.0], "tail": 5, "momentum": 0.9}});
    let top = json!({"seeed": 1});
    for doc in [nested, top] {
        let cfg = write_config(tmp.path(), "c.json", &doc);
        let o = sciml(&["sgd-toy", "--config", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(o.status.code(), Some(2), "{doc}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    }
}

#[test]
fn invalid_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sciml(&["solve-fd", "--kappa", "-1", "--out", "neg"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = sciml(&["sgd-toy", "--lr-schedule", "cosine"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverged_run_exits_3_with_history() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &json!({"params": {"lr": 1e6, "lr_schedule": "constant", "steps": 100, "start": [-1.0, 2.0], "tail": 10}}),
    );
    let o = sciml(&["sgd-toy", "--config", cfg.to_str().unwrap(), "--out", "div"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let hist = fs::read_to_string(tmp.path().join("div/history.csv")).unwrap();
    assert!(hist.lines().count() > 2);
    assert_eq!(manifest(&tmp.path().join("div"))["status"], "diverged");
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sciml(&["train-mlp", "--epochs", "20", "--out", "a"], tmp.path());
    assert!(o.status.success());
    let o = sciml(&["train-mlp", "--epochs", "0", "--init", "a/checkpoint.json", "--out", "b"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(tmp.path().join("a/checkpoint.json")).unwrap(), fs::read(tmp.path().join("b/checkpoint.json")).unwrap());
    // Training on from the checkpoint continues rather than restarting.
    let o = sciml(&["train-mlp", "--epochs", "1", "--init", "a/checkpoint.json", "--out", "c"], tmp.path());
    assert!(o.status.success());
    assert_ne!(fs::read(tmp.path().join("a/checkpoint.json")).unwrap(), fs::read(tmp.path().join("c/checkpoint.json")).unwrap());
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str], env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_sciml"));
        c.args(args).args(["--out", out]).current_dir(tmp.path()).env_remove("SCIML_SEED");
        if let Some(s) = env {
            c.env("SCIML_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(tmp.path().join(out).join("results.csv")).unwrap()
    };
    let args = ["train-mlp", "--epochs", "2"];
    let by_env = run(&args, Some("5"), "env");
    let by_flag = run(&["train-mlp", "--epochs", "2", "--seed", "5"], Some("9"), "flag");
    let default = run(&args, None, "default");
    assert_eq!(by_env, by_flag);
    assert_ne!(by_env, default);
    assert_eq!(manifest(&tmp.path().join("default"))["seed"], 0);
    let cfg = write_config(tmp.path(), "s.json", &json!({"seed": 5}));
    let by_cfg = run(&["train-mlp", "--epochs", "2", "--config", cfg.to_str().unwrap()], Some("9"), "cfg");
    assert_eq!(by_cfg, by_env);
}

#[test]
fn documented_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sciml(&["solve-fd", "--a", "1", "--kappa", "1", "--n", "64", "--out", "fd"], tmp.path());
    assert!(o.status.success());
    assert!(manifest(&tmp.path().join("fd"))["metrics"]["max_error"].as_f64().unwrap() < 1e-5);
    let o = sciml(&["gradcheck", "--seed", "7", "--out", "gc"], tmp.path());
    assert!(o.status.success());
    let m = manifest(&tmp.path().join("gc"));
    assert!(m["metrics"]["max_first_order_rel_error"].as_f64().unwrap() < 1e-5);
    assert_eq!(m["metrics"]["within_tolerance"], true);
    let o = sciml(&["sgd-toy", "--lr-schedule", "inverse_sqrt", "--out", "sgd"], tmp.path());
    assert!(o.status.success());
    assert!(manifest(&tmp.path().join("sgd"))["metrics"]["final_distance"].as_f64().unwrap() < 0.05);
}

#[test]
fn relative_paths_in_config_resolve_against_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(sciml(&["train-mlp", "--epochs", "3", "--out", "run"], tmp.path()).status.success());
    let mut params = serde_json::to_value(sciml_cli::commands::TrainMlpParams::default()).unwrap();
    params["epochs"] = json!(0);
    params["init"] = json!("checkpoint.json");
    let cfg = write_config(tmp.path(), "c.json", &json!({"output_dir": "run", "params": params}));
    let o = sciml(&["train-mlp", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
