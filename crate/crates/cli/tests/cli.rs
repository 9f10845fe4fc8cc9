use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cgt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgt"))
        .current_dir(dir)
        .env_remove("CGT_OUT_DIR")
        .args(args)
        .output()
        .expect("spawn cgt")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cgt(dir, args);
    assert!(
        out.status.success(),
        "cgt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const C6: &str = r#"{"num_nodes":6,"node_feats":[[0],[0],[0],[0],[0],[0]],"edges":[[0,1,0],[1,2,0],[2,3,0],[3,4,0],[4,5,0],[5,0,0]],"y":2.0}"#;

const SHORT_TRAINING: &str =
    r#"{"epochs":4,"warmup_epochs":1,"lr":0.003,"weight_decay":0.0,"batch_size":8,"seed":0}"#;

/// Generates a small ring-regression set and trains briefly on it.
fn trained_run(dir: &Path) {
    ok(dir, &["--out-dir", "run", "generate", "--graphs", "30", "--min-nodes", "6", "--max-nodes", "10"]);
    std::fs::write(dir.join("train.json"), SHORT_TRAINING).unwrap();
    ok(
        dir,
        &[
            "--out-dir", "run", "train", "--config", "run/model-config.json", "--dataset",
            "run/dataset.jsonl", "--train-config", "train.json",
        ],
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c6.jsonl"), C6).unwrap();
    let out = cgt(dir.path(), &["preprocess", "c6.jsonl", "--rpe", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cgt(dir.path(), &["eval", "missing.json", "c6.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cgt(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn preprocess_is_byte_stable_and_finds_the_hexagon() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c6.jsonl"), C6).unwrap();
    let args = ["preprocess", "c6.jsonl", "--rpe", "rwse", "--steps", "16", "--rings", "6"];
    ok(d, &[&["--out-dir", "a"][..], &args].concat());
    ok(d, &[&["--out-dir", "b"][..], &args].concat());
    let a = std::fs::read(d.join("a/sidecar.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/sidecar.json")).unwrap());

    let sidecar = read_json(&d.join("a/sidecar.json"));
    let rings = &sidecar["graphs"][0]["rings"];
    assert_eq!(rings["rings"].as_array().unwrap().len(), 1, "{rings}");
    assert_eq!(rings["rings"][0].as_array().unwrap().len(), 6);
}

#[test]
fn manifest_is_written_even_when_the_command_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgt(dir.path(), &["--out-dir", "run", "preprocess", "absent.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let m = read_json(&dir.path().join("run/manifest-preprocess.json"));
    assert_eq!(m["command"], "preprocess");
    assert_eq!(m["dataset_path"], "absent.jsonl");
    assert!(m["tool_version"].is_string());
}

#[test]
fn newer_sidecar_versions_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_run(d);
    ok(d, &["--out-dir", "run", "preprocess", "run/dataset.jsonl", "--steps", "8", "--rings", "6", "--bond-types", "3"]);
    let path = d.join("run/sidecar.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":2", 1);
    std::fs::write(&path, text).unwrap();
    let out = cgt(d, &["--out-dir", "run", "eval", "run/checkpoint.json", "run/dataset.jsonl", "--sidecar", "run/sidecar.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn train_eval_and_dump_attention_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_run(d);
    let history = read_json(&d.join("run/history.json"));
    let best_val = history["best_val"].as_f64().unwrap();

    let stdout = ok(d, &["--out-dir", "run", "eval", "run/checkpoint.json", "run/dataset.jsonl"]);
    assert_eq!(stdout.trim(), format!("mae {best_val}"));
    assert_eq!(read_json(&d.join("run/eval.json"))["value"].as_f64().unwrap(), best_val);

    // The same numbers come out with structure read from a sidecar.
    ok(d, &["--out-dir", "run", "preprocess", "run/dataset.jsonl", "--steps", "8", "--rings", "6", "--bond-types", "3"]);
    let stdout = ok(
        d,
        &["--out-dir", "run", "eval", "run/checkpoint.json", "run/dataset.jsonl", "--sidecar", "run/sidecar.json"],
    );
    assert_eq!(stdout.trim(), format!("mae {best_val}"));

    ok(d, &["--out-dir", "run", "dump-attention", "run/checkpoint.json", "3", "1", "--dataset", "run/dataset.jsonl"]);
    let dump = read_json(&d.join("run/attention-g3-l1.json"));
    assert_eq!(dump["graph_id"], 3);
    assert_eq!(dump["layer"], 1);
    let channels = dump["channels"].as_array().unwrap();
    assert_eq!(channels.len(), 32);
    for ch in channels {
        for row in ch["rows"].as_array().unwrap() {
            let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
        }
    }

    let out = cgt(d, &["--out-dir", "run", "dump-attention", "run/checkpoint.json", "0", "4", "--dataset", "run/dataset.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out-dir", "run", "gradcheck"]);
    let report = read_json(&d.join("run/gradcheck.json"));
    assert!(report.is_object());
    let out = cgt(d, &["--out-dir", "run", "gradcheck", "--tol", "1e-30"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out-dir", "run", "generate", "--graphs", "20", "--min-nodes", "6", "--max-nodes", "8"]);
    std::fs::write(
        d.join("train.json"),
        r#"{"epochs":2,"warmup_epochs":1,"lr":0.003,"weight_decay":0.0,"batch_size":8,"seed":0}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "--out-dir", "run", "ablate", "--config", "run/model-config.json", "--dataset",
            "run/dataset.jsonl", "--train-config", "train.json", "--grid", "color-edge-value",
            "--seeds", "2",
        ],
    );
    let csv = std::fs::read_to_string(d.join("run/ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("config_id,seed,best_val,test_metric"));
    assert_eq!(lines.count(), 8);
    let summary = read_json(&d.join("run/ablation-summary.json"));
    assert_eq!(summary.as_array().unwrap().len(), 4);
}
