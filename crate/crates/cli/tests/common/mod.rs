#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SMALL_CONFIG: &str = "\
synth.n_dialogs = 400
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.d_ff = 32
train.batch_size = 16
train.max_steps = 120
train.eval_interval = 40
train.warmup_steps = 10
train.learning_rate = 0.005
analysis.subset_size = 10
";

/// Runs the tool in-process and returns its exit code.
pub fn run(out: &Path, config: Option<&Path>, args: &[&str]) -> i32 {
    let mut argv = vec!["turnshift".to_owned(), "--out-dir".to_owned(), out.display().to_string()];
    if let Some(c) = config {
        argv.push("--config".into());
        argv.push(c.display().to_string());
    }
    argv.extend(args.iter().map(|a| (*a).to_owned()));
    turnshift_cli::run(argv)
}

pub fn run_ok(out: &Path, config: Option<&Path>, args: &[&str]) {
    assert_eq!(run(out, config, args), 0, "turnshift {}", args.join(" "));
}

pub const STAGES: &[&[&str]] = &[
    &["gen"],
    &["vocab"],
    &["prepare"],
    &["train", "--variant", "baseline"],
    &["train", "--variant", "rc"],
    &["threshold"],
    &["eval"],
    &["analyze"],
];

pub fn pipeline(out: &Path, config: Option<&Path>) {
    for stage in STAGES {
        run_ok(out, config, stage);
    }
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

/// Every file in `dir` with its bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}
