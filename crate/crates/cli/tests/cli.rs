use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_SIM: [&str; 6] = ["--set", "assets=2", "--set", "days=120", "--set", "intraday_steps=42"];

fn panelvar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelvar"))
        .args(args)
        .current_dir(dir)
        .env_remove("PANELVAR_THREADS")
        .output()
        .expect("binary runs")
}

fn read(path: PathBuf) -> String {
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest_value(dir: &Path, key: &str) -> Option<String> {
    let text = read(dir.join("manifest.txt"));
    text.lines().find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')).map(str::to_string))
}

/// Simulates a small tick file and returns its path.
fn ticks(tmp: &TempDir) -> PathBuf {
    let mut args = vec!["simulate", "--seed", "4", "--out-dir", "sim"];
    args.extend(SMALL_SIM);
    let out = panelvar(&args, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    tmp.path().join("sim/prices.csv")
}

#[test]
fn manifest_written_on_config_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.txt"), "window = -3\nlambda = heavy\n").unwrap();
    let out = panelvar(&["simulate", "--config", "bad.txt", "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let dir = tmp.path().join("o");
    assert_eq!(manifest_value(&dir, "status").as_deref(), Some("error"));
    let error = manifest_value(&dir, "error").unwrap();
    assert!(error.contains("window") && error.contains("lambda"), "{error}");
    assert!(!dir.join("prices.csv").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = panelvar(&["simulate", "--set", "bogus=1", "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(manifest_value(&tmp.path().join("o"), "error").unwrap().contains("bogus"));
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_panelvar"))
        .args(["simulate", "--out-dir", "o", "--seed", "9"])
        .current_dir(tmp.path())
        .env("PANELVAR_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let dir = tmp.path().join("o");
    assert_eq!(manifest_value(&dir, "status").as_deref(), Some("error"));
    assert_eq!(manifest_value(&dir, "seed").as_deref(), Some("9"));
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.cfg"), "# small\nseed = 3\nwindow = 70\ndays = 30\n").unwrap();
    let out = panelvar(
        &["simulate", "--config", "run.cfg", "--seed", "5", "--out-dir", "o", "--set", "assets=2", "--set", "intraday_steps=12"],
        tmp.path(),
    );
    assert!(out.status.success());
    let dir = tmp.path().join("o");
    assert_eq!(manifest_value(&dir, "seed").as_deref(), Some("5"));
    assert_eq!(manifest_value(&dir, "config.window").as_deref(), Some("70"));
    assert_eq!(manifest_value(&dir, "config.days").as_deref(), Some("30"));
}

#[test]
fn config_hash_ignores_output_directory() {
    let tmp = TempDir::new().unwrap();
    let mut a = vec!["simulate", "--out-dir", "a"];
    a.extend(SMALL_SIM);
    let mut b = vec!["simulate", "--out-dir", "b"];
    b.extend(SMALL_SIM);
    assert!(panelvar(&a, tmp.path()).status.success());
    assert!(panelvar(&b, tmp.path()).status.success());
    assert_eq!(read(tmp.path().join("a/manifest.txt")), read(tmp.path().join("b/manifest.txt")));
}

#[test]
fn pipeline_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = ticks(&tmp);
    let data = data.to_str().unwrap();
    let run = |dir: &str| {
        let out = panelvar(
            &[
                "run", "--data", data, "--out-dir", dir, "--window", "60", "--models", "pqr-rv,uqr-rv,riskmetrics", "--taus",
                "0.05,0.95", "--set", "grid_seconds=600", "--set", "mc_reps=99", "--set", "frontier_points=5",
            ],
            tmp.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run("one");
    run("two");
    let names: Vec<String> = read(tmp.path().join("one/manifest.txt"))
        .lines()
        .filter_map(|l| l.strip_prefix("output.").and_then(|r| r.split('=').next()).map(str::to_string))
        .collect();
    for expected in ["measures.csv", "fit.csv", "forecasts.csv", "backtest.csv", "gmvar.csv", "frontier.csv"] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }
    for name in names.iter().map(String::as_str).chain(["manifest.txt"]) {
        assert_eq!(read(tmp.path().join("one").join(name)), read(tmp.path().join("two").join(name)), "{name}");
    }
}

#[test]
fn riskmetrics_median_forecast_is_zero_and_flagged() {
    let tmp = TempDir::new().unwrap();
    let data = ticks(&tmp);
    let out = panelvar(
        &[
            "forecast", "--data", data.to_str().unwrap(), "--out-dir", "f", "--window", "60", "--models", "riskmetrics", "--taus",
            "0.5", "--set", "grid_seconds=600",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let forecasts = read(tmp.path().join("f/forecasts.csv"));
    let rows: Vec<&str> = forecasts.lines().skip(1).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("0")), "{rows:?}");
    let flags = read(tmp.path().join("f/flags.csv"));
    assert_eq!(flags.lines().skip(1).filter(|l| l.ends_with("DegenerateCutoff")).count(), rows.len());
}

#[test]
fn backtest_of_supplied_forecasts() {
    let tmp = TempDir::new().unwrap();
    let data = ticks(&tmp);
    let forecast = panelvar(
        &[
            "forecast", "--data", data.to_str().unwrap(), "--out-dir", "f", "--window", "60", "--models", "pqr-rv", "--taus", "0.05",
            "--set", "grid_seconds=600",
        ],
        tmp.path(),
    );
    assert!(forecast.status.success());
    let out = panelvar(&["backtest", "--forecasts", "f/forecasts.csv", "--out-dir", "b", "--set", "mc_reps=99"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read(tmp.path().join("b/backtest.csv"));
    assert_eq!(report.lines().count(), 2);
    assert!(report.lines().nth(1).unwrap().starts_with("pqr-rv,0.05,59,"));
    // One model leaves nothing to compare.
    assert_eq!(read(tmp.path().join("b/panel_b.csv")).lines().nth(1), Some("NA,NA,NA,NA"));
}

#[test]
fn data_commands_reject_missing_input() {
    let tmp = TempDir::new().unwrap();
    let out = panelvar(&["measures", "--data", "absent.csv", "--out-dir", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(manifest_value(&tmp.path().join("o"), "status").as_deref(), Some("error"));
}
