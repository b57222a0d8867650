//! Drives the `bendlens` binary end to end on a miniature configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn desk() -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Desk config shrunk to run in well under a second.
fn tiny() -> Value {
    let mut c = desk();
    c["ensemble"]["M"] = 64.into();
    c["ensemble"]["side"] = 8.into();
    c["data"]["per_class_counts"] = serde_json::json!({ "train": 12, "test": 4 });
    let g = &mut c["gmvae"];
    g["epochs"] = 2.into();
    g["triplet_warmup"] = 1.into();
    g["conv_channels"] = serde_json::json!([2, 4, 4]);
    g["d"] = 4.into();
    g["classifier_hidden"] = 8.into();
    let a = &mut c["ae"];
    a["epochs"] = 1.into();
    a["cae_epochs"] = 1.into();
    a["channels"] = serde_json::json!([2, 2, 2]);
    c
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn bendlens(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bendlens"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

#[test]
fn stages_run_in_order_and_refresh_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = tmp.path().join("run");

    // Every stage refuses to run before its inputs exist.
    assert_eq!(code(&bendlens(&cfg, &out, &["synth-data"])), 1);
    assert_eq!(code(&bendlens(&cfg, &out, &["train", "--model", "gmvae"])), 1);
    assert_eq!(code(&bendlens(&cfg, &out, &["eval"])), 1);

    for stage in [
        &["simulate"][..],
        &["synth-data"],
        &["train", "--model", "gmvae"],
        &["train", "--model", "ae"],
        &["train", "--model", "cae"],
        &["eval"],
    ] {
        let o = bendlens(&cfg, &out, stage);
        assert_eq!(code(&o), 0, "{stage:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "psnr.csv",
        "report.json",
        "confusion_gmvae.csv",
        "confusion_cae.csv",
        "pca_raw.svg",
        "pca_latent.csv",
    ] {
        assert!(out.join("report").join(f).is_file(), "missing {f}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["artifacts"]["report/report.json"].is_string());

    // Evaluation is a pure function of the artifacts.
    let first = fs::read(out.join("report/report.json")).unwrap();
    assert_eq!(code(&bendlens(&cfg, &out, &["eval"])), 0);
    assert_eq!(first, fs::read(out.join("report/report.json")).unwrap());
}

#[test]
fn demo_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let mut manifests = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = bendlens(&cfg, &out, &["demo"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("psnr"));
        assert!(out.join("timings.json").is_file());
        manifests.push(fs::read(out.join("manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);

    let out = tmp.path().join("reseeded");
    assert_eq!(code(&bendlens(&cfg, &out, &["--seed", "3", "demo"])), 0);
    assert_ne!(fs::read(out.join("manifest.json")).unwrap(), manifests[0]);
}

#[test]
fn invalid_input_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");

    let o = bendlens(&tmp.path().join("absent.json"), &out, &["simulate"]);
    assert_eq!(code(&o), 1);

    let mut bad = tiny();
    bad["ensemble"]["colour"] = "red".into();
    let cfg = write_config(tmp.path(), &bad);
    let o = bendlens(&cfg, &out, &["simulate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/ensemble"));

    fs::write(tmp.path().join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(&bendlens(&tmp.path().join("broken.json"), &out, &["simulate"])), 1);

    // A corrupted artifact is a format error, not a crash.
    let cfg = write_config(tmp.path(), &tiny());
    assert_eq!(code(&bendlens(&cfg, &out, &["simulate"])), 0);
    fs::write(out.join("ensemble.spkl"), b"JUNKJUNK").unwrap();
    let o = bendlens(&cfg, &out, &["synth-data"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
}

#[test]
fn runtime_failure_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    // The output directory cannot be created beneath a regular file.
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, b"").unwrap();
    let o = bendlens(&cfg, &blocker.join("run"), &["simulate"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn experiment_flag_is_validated() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let o = bendlens(&cfg, &tmp.path().join("run"), &["--experiment", "3", "simulate"]);
    assert_eq!(code(&o), 1);
    let o = bendlens(&cfg, &tmp.path().join("run"), &["--experiment", "2", "simulate"]);
    assert_eq!(code(&o), 0);
}
