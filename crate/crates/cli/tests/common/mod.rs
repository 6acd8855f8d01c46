#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn hreb() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hreb"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    hreb().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Synthetic splits written under `dir` via the CLI.
pub fn synth(dir: &Path, seed: u64, sentences: usize, types: usize) -> PathBuf {
    let data = dir.join("data");
    let o = run(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--sentences",
        &sentences.to_string(),
        "--types",
        &types.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

/// Config file with data paths relative to `dir` plus `extra` lines.
pub fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!(
        "train_path = data/train.txt\nvalid_path = data/valid.txt\ntest_path = data/test.txt\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

pub const SMALL: &str = "d_model = 16\nz_dim = 16\nv_dim = 32\nn_ema_head = 4\nchunk_size = 4\nh_lstm = 16\n\
                         lr = 0.01\nbatch_size = 8\nmax_epochs = 4\nseed = 3\n";

pub fn train(cfg: &Path, out: &Path, sets: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    run(&args)
}

/// `epoch P R F1 loss` records of a metric log, comments dropped.
pub fn records(log: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').map(String::from).collect())
        .collect()
}
