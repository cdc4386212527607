//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use kanode::io::{load_checkpoint, parse_loss_csv, read_checkpoint};

fn kanode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kanode"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn invalid_config_exits_with_code_2_and_lists_every_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"id": "lv", "lr": -1, "epochs": 0, "bogus": 1}"#).unwrap();
    let out = kanode(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["lr", "epochs", "bogus"] {
        assert!(err.contains(key), "missing `{key}` in:\n{err}");
    }
}

#[test]
fn unknown_experiment_exits_with_code_2() {
    let out = kanode(&["run", "--experiment", "heat"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_generic_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = kanode(&["symbolic", path(&dir.path().join("none.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn short_run_writes_outputs_and_checkpoints_feed_other_commands() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("lv");
    let out = kanode(&[
        "run", "--experiment", "lv", "--epochs", "3", "--seed", "7", "--out", path(&run_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.json",
        "loss.csv",
        "checkpoint.json",
        "checkpoint_last.json",
        "field.csv",
        "metrics.json",
        "manifest.json",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let history = parse_loss_csv(&std::fs::read_to_string(run_dir.join("loss.csv")).unwrap()).unwrap();
    assert_eq!(history.last().unwrap().epoch, 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["files"].as_array().unwrap().len() >= 6);

    let ckpt = run_dir.join("checkpoint.json");
    assert!(read_checkpoint(&ckpt).unwrap().input_ranges.is_some());
    assert_eq!(load_checkpoint(&ckpt).unwrap().param_count(), 240);

    let land_dir = dir.path().join("land");
    let out = kanode(&["landscape", path(&ckpt), "--out", path(&land_dir), "--nx", "5", "--ny", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(land_dir.join("landscape.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 4);

    let sym_dir = dir.path().join("sym");
    let out = kanode(&["symbolic", path(&ckpt), "--max-terms", "1", "--samples", "20", "--out", path(&sym_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sym_dir.join("symbolic.csv").is_file());
}

#[test]
fn runs_are_reproducible_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let params = |name: &str| {
        let d = dir.path().join(name);
        let out = kanode(&["run", "-e", "lv", "--epochs", "2", "--seed", "3", "--out", path(&d)]);
        assert!(out.status.success());
        load_checkpoint(&d.join("checkpoint_last.json")).unwrap().params()
    };
    assert_eq!(params("a"), params("b"));
}
