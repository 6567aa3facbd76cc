//! Helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub const SMALL: &str = r#"
seed = 3

[scene]
max_boxes = 3

[decoder]
embed_dim = 8
n_heads = 2
n_layers = 1
n_obj_queries = 4
hidden_dim = 8

[train]
steps = 3
batch_size = 2
"#;

pub fn raydn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raydn")).current_dir(dir).args(args).output().expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = raydn(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

pub fn digest_tree(root: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            stack.extend(fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()));
        } else {
            let hash = Sha256::digest(fs::read(&p).unwrap());
            out.push((p.strip_prefix(root).unwrap().to_path_buf(), format!("{hash:x}")));
        }
    }
    out.sort();
    out
}

/// Runs every subcommand into `root` and returns the digests of all outputs.
pub fn full_pipeline(root: &Path) -> Vec<(PathBuf, String)> {
    fs::write(root.join("small.toml"), SMALL).unwrap();
    let c = ["--config", "small.toml"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = c.iter().chain(args).copied().collect();
        ok(root, &all);
    };
    run(&["gen-scenes", "--count", "3", "--out", "out/scenes"]);
    run(&["build-queries", "--scenes", "out/scenes", "--out", "out/queries.json"]);
    run(&["train", "--scenes", "out/scenes", "--with-beam", "--out", "out/run"]);
    run(&["eval", "--model", "out/run/model.bin", "--scenes", "out/scenes", "--out", "out/report"]);
    run(&["beta-sample", "--n", "300", "--svg", "--out", "out/beta"]);
    run(&["plot", "out/run/losses.csv", "out/report/pr_curves.csv", "out/beta/samples.csv", "--out", "out/plots"]);
    digest_tree(&root.join("out"))
}
