use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const REFERENCE_ROWS: &str = "[[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.2, 0.3, 0.5]]";

fn config(rows: &str, extra: &str) -> String {
    format!(
        r#"seed = 0

[feature_space]
rows = {rows}

[dataset]
n_items = 400

[train]
batch_size = 50
epochs = 2
checkpoint_every = 1
{extra}"#
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn ccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccl"))
        .args(args)
        .output()
        .unwrap()
}

fn run_in(dir: &Path, cfg: &Path, args: &[&str]) -> Output {
    let mut all = vec![
        args[0],
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ];
    all.extend_from_slice(&args[1..]);
    ccl(&all)
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn predict_reference_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &repo_config("reference.toml"), &["predict"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.trim_start().starts_with("1.22195e-3"), "{stdout}");
    let text = fs::read_to_string(tmp.path().join("predicted.csv")).unwrap();
    let first = text.lines().nth(1).unwrap();
    assert!(first.starts_with("0,0,"));
    let target: f64 = first.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(format!("{target:.5}"), "0.00122");
    assert_eq!(json(&tmp.path().join("predicted.json"))["n"], 1000);
}

#[test]
fn predict_candidate_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config(REFERENCE_ROWS, ""));
    let out = run_in(tmp.path(), &cfg, &["predict", "--candidates", "1000"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let j = json(&tmp.path().join("predicted.json"));
    assert_eq!(j["n"], 1000);
    assert_eq!(
        format!("{:.5}", j["target"][0][0].as_f64().unwrap()),
        "0.00122"
    );
}

#[test]
fn identity_matrix_has_zero_cross_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &config("[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]", ""),
    );
    let out = run_in(tmp.path(), &cfg, &["predict"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let t = &json(&tmp.path().join("predicted.json"))["target"];
    for i in 0..3 {
        for j in 0..3 {
            let v = t[i][j].as_f64().unwrap();
            if i == j {
                assert!(v > 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn malformed_row_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &config(
            "[\n  [0.5, 0.3, 0.2],\n  [0.5, 0.6, 0.2],\n  [0.2, 0.3, 0.5],\n]",
            "",
        ),
    );
    let out = run_in(tmp.path(), &cfg, &["predict"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("row 1") && err.contains("exp.toml:6"), "{err}");
}

#[test]
fn missing_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ccl(&[
        "predict",
        "--config",
        tmp.path().join("nope.toml").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(ccl(&["predict"]).status.code(), Some(2));
    assert_eq!(ccl(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn single_epoch_train_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &config(REFERENCE_ROWS, "").replace("epochs = 2", "epochs = 1"),
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = run_in(d, &cfg, &["train"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().nth(1).unwrap().starts_with("infonce-seed0,1,"));
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 8, "{names:?}");
    for n in names {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn seed_flag_names_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config(REFERENCE_ROWS, ""));
    let out = run_in(tmp.path(), &cfg, &["train", "--seed", "7"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        json(&tmp.path().join("report.json"))["run_id"],
        "infonce-seed7"
    );
    assert_eq!(json(&tmp.path().join("manifest.json"))["train"]["seed"], 7);
}

#[test]
fn runaway_training_exits_3_with_failure_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &config(
            REFERENCE_ROWS,
            "\n[train.optimizer]\nkind = \"sgd\"\nlr = 1e300\n",
        ),
    );
    let out = run_in(tmp.path(), &cfg, &["train"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let rep = json(&tmp.path().join("report.json"));
    assert_eq!(rep["status"], "failed");
    assert_eq!(rep["numerical"], true);
}

#[test]
fn sweep_rejects_zero_repeats_and_unknown_axes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config(REFERENCE_ROWS, ""));
    let out = run_in(
        tmp.path(),
        &cfg,
        &["sweep", "--axis", "tau", "--values", "1", "--repeats", "0"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("repeats"), "{}", stderr(&out));
    let out = run_in(
        tmp.path(),
        &cfg,
        &["sweep", "--axis", "warmup", "--values", "1"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn batch_size_sweep_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &config(REFERENCE_ROWS, "").replace("epochs = 2", "epochs = 1"),
    );
    let out = run_in(
        tmp.path(),
        &cfg,
        &[
            "sweep",
            "--axis",
            "batch_size",
            "--values",
            "10,40",
            "--repeats",
            "2",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut r = csv::Reader::from_path(tmp.path().join("summary.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let negatives: Vec<&str> = rows.iter().map(|x| &x[col("negatives")]).collect();
    assert_eq!(negatives, ["9", "9", "39", "39"]);
    for sub in [
        "batch_size=10/rep0",
        "batch_size=10/rep1",
        "batch_size=40/rep0",
        "batch_size=40/rep1",
    ] {
        assert!(tmp.path().join(sub).join("report.json").exists(), "{sub}");
    }
}

#[test]
fn bounds_follow_the_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config(REFERENCE_ROWS, ""));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run_in(&a, &cfg, &["bounds"]).status.success());
    assert!(run_in(&b, &cfg, &["bounds", "--epsilon", "0.2"])
        .status
        .success());
    let na = json(&a.join("bounds.json"))["sample_complexity"]
        .as_f64()
        .unwrap();
    let nb = json(&b.join("bounds.json"))["sample_complexity"]
        .as_f64()
        .unwrap();
    assert_eq!(format!("{na:.4e}"), "1.8045e7");
    assert!((na / nb - 4.0).abs() < 1e-9);
}

#[test]
fn bounds_reject_certain_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config(REFERENCE_ROWS, ""));
    let out = run_in(tmp.path(), &cfg, &["bounds", "--confidence", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unreachable_feature_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &config("[[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.5, 0.5, 0.0]]", ""),
    );
    let out = run_in(tmp.path(), &cfg, &["bounds"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
