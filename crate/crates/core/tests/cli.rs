mod common;

use std::path::Path;
use std::process::{Command, Output};

fn incdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incdet"))
        .args(args)
        .env_remove(incdet::cli::LOG_ENV)
        .output()
        .expect("spawn incdet")
}

fn ok(args: &[&str]) -> String {
    let out = incdet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&common::tiny_experiment()).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_is_reproducible_and_checkpoints_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--seed", "3", "--out", s(&data)]);
    let line = ok(&["train", "--config", &cfg, "--seed", "3", "--variant", "full", "--out", s(&a)]);
    assert!(line.contains("mAP@0.25"), "{line}");
    ok(&["train", "--config", &cfg, "--seed", "3", "--variant", "full", "--data", s(&data), "--out", s(&b)]);
    for file in ["metrics.json", "model.ckpt"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }

    let eval_dir = dir.path().join("eval");
    let ckpt = a.join("model.ckpt");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval_dir)]);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(doc["format"], "incdet-eval");
    assert_eq!(doc["tasks_covered"], 2);
    // Re-scoring the trained model on the same eval scenes reproduces its final report.
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(doc["metrics"]["avg_map"], metrics["tasks"][1]["metrics"]["avg_map"]);
}

#[test]
fn ablate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ladder");
    let text = ok(&["ablate", "--config", &cfg, "--seeds", "1,2", "--out", s(&out)]);
    for seed in [1, 2] {
        for v in ["full", "no_pgb", "no_pgb_rdd", "no_pgb_rdd_rfd"] {
            assert!(out.join(format!("seed-{seed}/{v}/metrics.json")).is_file());
        }
    }
    for v in ["full", "no_pgb", "no_pgb_rdd", "no_pgb_rdd_rfd"] {
        assert!(text.contains(v), "{text}");
    }
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "{csv}");
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")), "{csv}");

    let merged = dir.path().join("merged");
    ok(&["report", s(&out), "--out", s(&merged)]);
    assert_eq!(std::fs::read_to_string(merged.join("comparison.csv")).unwrap(), csv);
    assert!(merged.join("comparison.txt").is_file());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(incdet(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(incdet(&["nothing"]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = incdet(&["train", "--config", s(&bad), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!out_dir.exists());

    let out = incdet(&["report", s(&dir.path().join("missing")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
}
