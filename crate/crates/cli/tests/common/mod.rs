#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_depthattack")
}

/// Runs the CLI in `dir` with the given arguments.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .env_clear()
        .output()
        .expect("spawn depthattack")
}

/// Like [`run`] but panics with the captured stderr on a non-zero exit.
pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every regular file under `root`, relative and sorted.
pub fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc.sort();
    acc
}

/// A small end-to-end pipeline run inside `dir` using relative paths only.
pub fn pipeline(dir: &Path) {
    ok(dir, &["gen", "--count", "12", "--size", "16", "--seed", "3", "--out", "data"]);
    ok(dir, &["verify", "--data", "data"]);
    ok(dir, &["train", "--arch", "arch-A", "--epochs", "2", "--data", "data", "--out", "a.bin"]);
    ok(dir, &["train", "--arch", "arch-B", "--epochs", "2", "--data", "data", "--out", "b.bin"]);
    ok(dir, &["train", "--task", "seg", "--epochs", "2", "--data", "data", "--out", "seg.bin"]);
    ok(
        dir,
        &[
            "attack", "--method", "mifgsm", "--epsilon", "8", "--model", "a.bin", "--eval-model", "b.bin", "--data",
            "data", "--out", "nt",
        ],
    );
    ok(
        dir,
        &[
            "attack", "--mode", "targeted", "--target-depth", "5,80", "--iterations", "4", "--model", "a.bin", "--data",
            "data", "--select-below", "100", "--out", "tg",
        ],
    );
    ok(
        dir,
        &[
            "universal", "--epochs", "1", "--iterations", "2", "--batch-size", "3", "--depth-model", "a.bin",
            "--seg-model", "seg.bin", "--data", "data", "--out", "uni",
        ],
    );
    ok(
        dir,
        &["report", "--in", "nt/results.csv", "--in", "tg/results.csv", "--in", "uni/universal.csv", "--out", "report.md"],
    );
}
