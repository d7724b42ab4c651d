//! Black-box tests of the `pf` binary: exit codes, cache behavior,
//! and report formats.

use std::path::Path;
use std::process::{Command, Output};

fn pf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pf"))
        .args(args)
        .current_dir(dir)
        .env_remove("PF_SEED")
        .output()
        .expect("spawn pf")
}

const SMALL: &[&str] = &[
    "--set",
    "synth.n_months=18",
    "--set",
    "synth.n_shops=5",
    "--set",
    "synth.n_items=10",
    "--set",
    "split.train_end=15",
    "--set",
    "split.validation_block=16",
    "--set",
    "split.test_block=17",
    "--set",
    "gbt.n_rounds=8",
    "--set",
    "seqnet.epochs=2",
    "--set",
    "seqnet.hidden_lstm=8",
    "--set",
    "seqnet.hidden_static=4",
    "--set",
    "seqnet.hidden_merge=8",
    "--seed",
    "3",
];

fn small(cmd: &[&str], dir: &Path) -> Output {
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend(cmd);
    pf(&args, dir)
}

fn ok(cmd: &[&str], dir: &Path) -> String {
    let out = small(cmd, dir);
    assert!(
        out.status.success(),
        "pf {cmd:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pf(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(pf(&["--version"], dir.path()).status.code(), Some(0));
}

#[test]
fn unknown_model_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pf(&["train", "prophet"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_sales_file_names_it_and_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = small(&["ingest"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sales_train.csv"), "stderr: {stderr}");
}

#[test]
fn bad_override_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pf(&["--set", "no_such_key=1", "synth"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    let first = std::fs::read(dir.path().join("cache/grid.csv")).unwrap();
    ok(&["ingest"], dir.path());
    let second = std::fs::read(dir.path().join("cache/grid.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn stale_grid_cache_refused_by_features() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    // Upstream raw file changes behind the cache's back.
    let sales = dir.path().join("data/sales_train.csv");
    let mut text = std::fs::read_to_string(&sales).unwrap();
    text.push_str("15.06.2014,17,0,0,100.0,1\n");
    std::fs::write(&sales, text).unwrap();
    let out = small(&["features"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stale") && stderr.contains("pf ingest"), "stderr: {stderr}");
    // Re-ingesting clears the refusal.
    ok(&["ingest"], dir.path());
    ok(&["features"], dir.path());
}

#[test]
fn features_manifest_lists_lag_columns() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    let stdout = ok(&["features"], dir.path());
    assert!(stdout.contains("target_item_lag_1"), "stdout: {stdout}");
}

#[test]
fn train_predict_evaluate_gbt() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    ok(&["features"], dir.path());
    let stdout = ok(&["train", "gbt"], dir.path());
    assert!(stdout.contains("XGBoost-style GBT"), "stdout: {stdout}");
    assert!(dir.path().join("out/gbt.json").exists());
    ok(&["predict", "gbt"], dir.path());
    let submission = std::fs::read_to_string(dir.path().join("out/submission.csv")).unwrap();
    assert!(submission.starts_with("ID,item_cnt_month\n"));
    assert_eq!(submission.lines().count(), 1 + 5 * 10);
    let stdout = ok(&["evaluate", "gbt"], dir.path());
    assert!(stdout.contains("validation rmse:"), "stdout: {stdout}");
}

#[test]
fn evaluate_baseline_prints_constant_mean_rmse() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    let stdout = ok(&["evaluate", "baseline"], dir.path());
    assert!(stdout.contains("validation rmse:"), "stdout: {stdout}");
}

#[test]
fn train_arima_reports_fallback_rate() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    let stdout = ok(&["train", "arima"], dir.path());
    assert!(stdout.contains("fallback rate"), "stdout: {stdout}");
    assert!(dir.path().join("out/arima_diagnostics.csv").exists());
    ok(&["predict", "arima"], dir.path());
}

#[test]
fn tune_writes_trial_log_with_requested_arity() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    ok(&["features"], dir.path());
    let stdout = ok(&["--set", "search.n_samples=3", "--set", "gbt.n_rounds=4", "tune"], dir.path());
    assert!(stdout.contains("best trial"), "stdout: {stdout}");
    let log = std::fs::read_to_string(dir.path().join("out/trials.csv")).unwrap();
    assert!(log.starts_with("trial,"));
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn compare_prints_three_rows_sorted() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth"], dir.path());
    ok(&["ingest"], dir.path());
    ok(&["features"], dir.path());
    let stdout = ok(&["compare"], dir.path());
    for name in ["XGBoost-style GBT", "LSTM", "ARIMA"] {
        assert!(stdout.contains(name), "missing {name}: {stdout}");
    }
    let report = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(report.starts_with("model,train_rmse,val_rmse,test_rmse\n"));
    assert_eq!(report.lines().count(), 4);
    // Printed rows are sorted by validation RMSE ascending.
    let table: Vec<&str> = stdout.lines().skip(1).take(3).collect();
    let vals: Vec<f64> = table
        .iter()
        .map(|line| {
            let cols: Vec<&str> = line.split_whitespace().collect();
            cols[cols.len() - 2].parse().unwrap()
        })
        .collect();
    assert!(vals.windows(2).all(|w| w[0] <= w[1]), "unsorted: {vals:?}");
}
