use std::path::Path;
use std::process::{Command, Output};

use hierrec::eval::{ComparisonReport, SimSpec};

fn hierrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierrec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = hierrec(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &[&str] = &[
    "--max-rounds",
    "5",
    "--windows.train_field",
    "[0,4]",
    "--windows.train_reg",
    "[4,6]",
    "--windows.test_field",
    "[6,9]",
    "--windows.test_rec",
    "[9,12]",
];

/// A directory holding a small simulated dataset under `data/`.
fn simulated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = SimSpec {
        num_users: 60,
        num_jobs: 40,
        days: 12,
        seed: 5,
        ..SimSpec::default()
    };
    std::fs::write(dir.path().join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    ok(dir.path(), &["simulate", "--spec", "spec.json"]);
    dir
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

#[test]
fn missing_spec_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hierrec(dir.path(), &["simulate"]).status.code(), Some(2));
    assert_eq!(hierrec(dir.path(), &["simulate", "--spec", "absent.json"]).status.code(), Some(2));
    assert_eq!(hierrec(dir.path(), &["train", "--no-such-key", "1"]).status.code(), Some(2));
}

#[test]
fn pipeline_trains_pushes_and_recommends() {
    let dir = simulated();
    let d = dir.path();
    ok(d, &with_small(&["train"]));
    assert!(d.join("out/M-viewApply/hier_model.json").exists());
    assert!(d.join("out/M-baseline/hier_model.json").exists());
    ok(d, &["infer"]);
    ok(d, &["push"]);
    assert!(d.join("store/M-viewApply/user_fields_store.jsonl").exists());

    ok(d, &["recommend", "--user", "u00000", "--k", "5", "--output", "rec.json"]);
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("rec.json")).unwrap()).unwrap();
    assert_eq!(rec["user_id"], "u00000");
    assert!(rec["recommendations"].as_array().unwrap().len() <= 5);

    assert_eq!(hierrec(d, &["recommend", "--user", "nobody"]).status.code(), Some(3));
}

#[test]
fn evaluate_reports_every_model() {
    let dir = simulated();
    ok(dir.path(), &with_small(&["evaluate"]));
    let text = std::fs::read_to_string(dir.path().join("out/comparison.json")).unwrap();
    let report = ComparisonReport::from_json(&text).unwrap();
    let names: Vec<&str> = report.models.keys().map(String::as_str).collect();
    for m in ["M-baseline", "M-view", "M-apply", "M-viewApply"] {
        assert!(names.contains(&m), "{m} missing from {names:?}");
    }
}
