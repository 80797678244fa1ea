use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn mcgan(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcgan"))
        .arg("--run-dir")
        .arg(run)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok_json(run: &Path, args: &[&str]) -> Value {
    let out = mcgan(run, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("no JSON error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn missing_upstream_artifact_names_producer() {
    let run = tempfile::tempdir().unwrap();
    let out = mcgan(run.path(), &["augment"]);
    assert_eq!(out.status.code(), Some(3));
    let e = err_json(&out);
    assert_eq!(e["error"]["code"], "dependency");
    assert_eq!(e["error"]["producer"], "phantom");
    assert_eq!(e["error"]["subcommand"], "augment");
    assert!(e["error"]["artifact"].as_str().unwrap().ends_with("dataset/manifest.json"));
}

#[test]
fn usage_errors_are_json() {
    let run = tempfile::tempdir().unwrap();
    let out = mcgan(run.path(), &["evaluate", "--by", "colour"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"]["code"], "usage");
    let bad = run.path().join("bad.json");
    std::fs::write(&bad, r#"{"detector": {"totl_steps": 3}}"#).unwrap();
    let out = mcgan(run.path(), &["--config", bad.to_str().unwrap(), "phantom"]);
    assert_eq!(out.status.code(), Some(1));
    let e = err_json(&out);
    assert_eq!(e["error"]["code"], "configuration");
    assert!(e["error"]["message"].as_str().unwrap().contains("detector.totl_steps"));
}

#[test]
fn short_pipeline_ratio_and_strata() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    let p = ok_json(run, &["phantom", "--scans", "5", "--seed", "4"]);
    let train = p["train"].as_u64().unwrap();
    assert!(train >= 1);
    ok_json(run, &["train-gan", "--steps", "3"]);
    let a = ok_json(run, &["augment", "--ratio", "3"]);
    assert_eq!(a["synthetic"].as_u64().unwrap(), 3 * train);
    assert_eq!(a["entries"].as_u64().unwrap(), 5 + 3 * train);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("augment/manifest.json")).unwrap()).unwrap();
    let text = manifest.to_string();
    assert!(!text.contains(run.to_str().unwrap()), "augment manifest holds absolute paths");

    ok_json(run, &["train-detector", "--steps", "2"]);
    let r = ok_json(run, &["evaluate", "--by", "size"]);
    assert_eq!(r["columns"], serde_json::json!(["CPM", "Small", "Medium", "Large"]));
    let r = ok_json(run, &["evaluate", "--by", "none"]);
    assert_eq!(r["columns"], serde_json::json!(["CPM"]));
    assert!(run.join("evaluate/froc.csv").exists());
    assert!(run.join("evaluate/detections/augmented.csv").exists());

    let stage: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("augment/MANIFEST.json")).unwrap()).unwrap();
    assert!(stage["inputs"].as_object().unwrap().contains_key("dataset/manifest.json"));
    assert!(stage["outputs"].as_object().unwrap().contains_key("manifest.json"));
}
