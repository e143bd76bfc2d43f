use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use puma::shapes::Shape;

fn puma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_puma"))
        .args(args)
        .env_remove("PUMA_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sine demos as plain CSV.
fn sine_csv(dir: &Path) -> PathBuf {
    let file = Shape::Sine.dataset();
    let mut text = String::from("demo,t,x_1,x_2\n");
    for (d, demo) in file.demos.iter().enumerate() {
        for (k, x) in demo.iter().enumerate() {
            text += &format!("{d},{},{},{}\n", k as f64 * file.dt, x[0], x[1]);
        }
    }
    let path = dir.join("sine.csv");
    std::fs::write(&path, text).unwrap();
    path
}

/// Converts the sine demos and trains a small model; returns (dataset, run dir).
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let csv = sine_csv(dir);
    let ds = dir.join("sine.json");
    let out = puma(&["convert", "--input", s(&csv), "--output", s(&ds)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.join("run");
    let out = puma(&[
        "train", "--preset", "euc", "--dataset", s(&ds), "--out", s(&run), "--iterations", "30", "--width", "16",
        "--batch", "8", "--seed", "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (ds, run)
}

#[test]
fn train_writes_artifacts_and_summary_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path());
    for f in ["checkpoint.json", "train_log.csv", "summary.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 3);
    assert_eq!(summary["config"]["train"]["iterations"], 30);
    assert_eq!(summary["config"]["preset"], "euc");
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
}

#[test]
fn eval_rollout_and_field_export() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, run) = trained(dir.path());
    let ck = run.join("checkpoint.json");
    let report = dir.path().join("eval.json");
    let out = puma(&["eval", "--checkpoint", s(&ck), "--dataset", s(&ds), "--L", "50", "--P", "20", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["rmse"]["per_demo"].as_array().unwrap().len(), 5);
    assert!(v["unsuccessful_pct"].as_f64().is_some());

    let rollouts = dir.path().join("rollouts");
    let out = puma(&["rollout", "--checkpoint", s(&ck), "--count", "3", "--steps", "20", "--out", s(&rollouts)]);
    assert_eq!(code(&out), 0);
    let first = std::fs::read_to_string(rollouts.join("rollout_0.csv")).unwrap();
    assert_eq!(first.lines().count(), 22);
    assert!(rollouts.join("rollout_2.csv").exists());

    let field = dir.path().join("field");
    let out = puma(&["sample-field", "--checkpoint", s(&ck), "--grid", "7", "--dataset", s(&ds), "--out", s(&field)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(field.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 50);
    let svg = std::fs::read_to_string(field.with_extension("svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed svg");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let csv = sine_csv(dir.path());
    let ds = dir.path().join("sine.json");
    assert_eq!(code(&puma(&["convert", "--input", s(&csv), "--output", s(&ds)])), 0);
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_puma"))
        .args(["train", "--dataset", s(&ds), "--out", s(&run), "--iterations", "2", "--width", "8", "--batch", "4"])
        .env("PUMA_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 41);
}

#[test]
fn certify_fixtures_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = puma(&["certify", "--fixture", "linear-stable", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cert: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["kind"], "empirical");
    let surfaces = std::fs::read_to_string(dir.path().join("surfaces.csv")).unwrap();
    assert!(surfaces.starts_with("d0,t,delta_max,beta"));
    assert_eq!(code(&puma(&["certify", "--fixture", "linear-unstable"])), 1);
}

#[test]
fn usage_and_io_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&puma(&["train", "--dataset", s(&missing), "--out", s(dir.path())])), 2);
    assert_eq!(code(&puma(&["eval", "--checkpoint", s(&missing), "--dataset", s(&missing)])), 2);
    assert_eq!(code(&puma(&["frobnicate"])), 2);
    assert_eq!(code(&puma(&["train", "--preset", "nope", "--dataset", s(&missing)])), 2);
}

#[test]
fn convert_second_order_and_sphere() {
    let dir = tempfile::tempdir().unwrap();
    let csv = sine_csv(dir.path());
    let ds = dir.path().join("second.json");
    assert_eq!(code(&puma(&["convert", "--input", s(&csv), "--output", s(&ds), "--order", "second"])), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ds).unwrap()).unwrap();
    assert_eq!(v["order"], "second");

    let file = Shape::SphereS.dataset();
    let mut text = String::new();
    for (d, demo) in file.demos.iter().enumerate() {
        for (k, x) in demo.iter().enumerate() {
            text += &format!("{d},{},{},{},{}\n", k as f64 * file.dt, x[0], x[1], x[2]);
        }
    }
    let sphere_csv = dir.path().join("s.csv");
    std::fs::write(&sphere_csv, text).unwrap();
    let out_path = dir.path().join("s.json");
    let out = puma(&["convert", "--input", s(&sphere_csv), "--output", s(&out_path), "--manifold", "sphere"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = puma::data::load_dataset(&out_path).unwrap();
    assert!(!loaded.spec.is_box());
}
