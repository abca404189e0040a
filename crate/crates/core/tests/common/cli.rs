//! Helpers for driving the `hprobe` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

pub const BIN: &str = env!("CARGO_BIN_EXE_hprobe");

/// Small synthetic data keeps each command to a few seconds.
pub const SMALL: [&str; 4] = [
    "--set",
    "synth.train_per_subclass=16",
    "--set",
    "synth.test_per_subclass=6",
];

/// Runs the binary and returns its exit code, echoing stderr on failure.
pub fn hprobe(args: &[&str]) -> i32 {
    let out = Command::new(BIN).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Re-executes the echo in `dir` into a sibling directory. Returns the names
/// of files that are missing, extra or not byte-identical.
pub fn rerun_differences(dir: &Path) -> Vec<String> {
    let again = dir.with_extension("rerun");
    let echo = dir.join("config.txt");
    if hprobe(&["run", "--config", p(&echo), "--out", p(&again)]) != 0 {
        return vec!["<rerun failed>".to_string()];
    }
    let (a, b) = (files(dir), files(&again));
    let names: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    names.into_iter().filter(|n| a.get(*n) != b.get(*n)).cloned().collect()
}
