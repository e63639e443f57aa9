#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dplc::config::ExperimentConfig;

/// The toy2d preset shrunk to a few seconds of training.
pub fn tiny_toml(run_id: &str) -> String {
    let toml = ExperimentConfig::preset("toy2d").unwrap().to_toml();
    let replaced = toml
        .replace("run_id = \"toy2d\"", &format!("run_id = \"{run_id}\""))
        .replace("n_samples = 50000", "n_samples = 1500")
        .replace("iterations = 1500", "iterations = 12")
        .replace("iterations = 600", "iterations = 12")
        .replace("width = 128", "width = 16")
        .replace("n_eval = 5000", "n_eval = 120")
        .replace("pv_codes = 256", "pv_codes = 8")
        .replace("pv_draws = 100", "pv_draws = 6")
        .replace("    4,\n    8,\n", "");
    assert_ne!(replaced, toml);
    replaced
}

pub fn write_tiny(dir: &Path, run_id: &str) -> PathBuf {
    let path = dir.join(format!("{run_id}.toml"));
    std::fs::write(&path, tiny_toml(run_id)).unwrap();
    path
}

pub fn dplc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dplc"))
        .args(args)
        .env_remove("DPLC_DEVICE")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// metrics.csv with the timing column dropped.
pub fn metrics_without_timing(path: &Path) -> Vec<Vec<String>> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_owned).collect();
    let skip = header.iter().position(|h| h == "wall_seconds").unwrap();
    let mut rows = vec![header.clone()];
    for rec in rd.records() {
        rows.push(rec.unwrap().iter().map(str::to_owned).collect());
    }
    for row in &mut rows {
        row.remove(skip);
    }
    rows
}
