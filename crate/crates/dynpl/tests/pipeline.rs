//! End-to-end CLI contract: the subcommands chain into a working pipeline
//! and usage errors exit with the conventional codes.

use std::path::Path;
use std::process::Command;

fn dynpl(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dynpl"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("failed to launch dynpl")
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = dynpl(dir, args);
    assert!(
        out.status.success(),
        "dynpl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn prepare_corpus(dir: &Path) {
    run_ok(dir, &["synth", "--seed", "7", "--stays", "250", "--n-problems", "8"]);
    run_ok(dir, &["ingest"]);
    run_ok(dir, &["vocab", "--min-docs", "2"]);
    run_ok(dir, &["labels", "--problems", "R-ICD-diag", "--min-count", "5"]);
}

#[test]
fn synth_then_train_produces_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    prepare_corpus(dir.path());
    run_ok(
        dir.path(),
        &["embed", "--dim", "16", "--window", "3", "--epochs", "1"],
    );
    run_ok(
        dir.path(),
        &[
            "train",
            "--model",
            "dynpl",
            "--outcome",
            "mortality30",
            "--filter-dim",
            "8",
            "--max-epochs",
            "3",
            "--seed",
            "5",
        ],
    );
    for name in ["checkpoint.json", "metrics.json", "reports.jsonl", "checkpoint.json.manifest.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["model"], "dynpl");
    assert!(metrics["extraction"]["micro_au_roc"].is_number());

    // downstream stages consume the checkpoint
    run_ok(dir.path(), &["eval", "--seed", "5", "--out", "eval_metrics.json"]);
    run_ok(dir.path(), &["explain", "--seed", "5", "--limit", "1"]);
    run_ok(dir.path(), &["fps", "--seed", "5", "--k", "5"]);
    assert!(dir.path().join("false_positives.jsonl").exists());
    let reports: Vec<_> = std::fs::read_dir(dir.path().join("reports"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "md"))
        .collect();
    assert_eq!(reports.len(), 1);
}

#[test]
fn baseline_and_oracle_models_train_from_the_same_corpus() {
    let dir = tempfile::tempdir().unwrap();
    prepare_corpus(dir.path());
    run_ok(
        dir.path(),
        &[
            "train", "--model", "cnn_max", "--embed-dim", "8", "--filter-dim", "4",
            "--max-epochs", "2", "--out", "cnn.json", "--metrics", "cnn_metrics.json",
        ],
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cnn_metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["model"], "cnn_max");
    assert!(metrics["extraction"].is_null());

    run_ok(dir.path(), &["oracle", "--truth", dir.path().join("truth.jsonl").to_str().unwrap()]);
    let oracle: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("oracle_metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(oracle["model"], "lr_oracle");
    assert!(oracle["outcome_au_roc"].as_f64().unwrap() > 0.5);
}

#[test]
fn bogus_selector_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dynpl(dir.path(), &["labels", "--problems", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dynpl(dir.path(), &["train", "--model", "lstm_attn"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dynpl(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dynpl(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
