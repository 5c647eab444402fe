//! Black-box tests of the command-line interface: exit codes, produced
//! files, and error messages, driven through the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tryon")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary launches")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("tryon-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Overrides that shrink every stage to seconds.
const TINY: &[&str] = &[
    "--set", "h=32", "--set", "w=32", "--set", "batch=2", "--set", "samples=20",
    "--set", "seg_iters=2", "--set", "gmm_iters=2", "--set", "alias_iters=2",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

/// Generate and preprocess a tiny dataset; returns its directory.
fn tiny_dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    let out = run(&with_tiny(&["synth-data", "--out", p(&data)]));
    assert_eq!(code(&out), 0, "synth-data failed: {}", stderr(&out));
    let out = run(&with_tiny(&["preprocess", "--data", p(&data)]));
    assert_eq!(code(&out), 0, "preprocess failed: {}", stderr(&out));
    data
}

#[test]
fn help_is_success_and_unknown_flags_are_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--definitely-not-a-flag"])), 2);
    assert_eq!(code(&run(&["train"])), 2, "missing required arguments");
}

#[test]
fn zero_sample_count_is_rejected() {
    let root = fresh_dir("zero-count");
    let data = root.join("data");
    let out = run(&with_tiny(&["synth-data", "--out", p(&data), "--count", "0"]));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn full_pipeline_round_trip_through_the_binary() {
    let root = fresh_dir("round-trip");
    let data = tiny_dataset(&root);
    let ck = root.join("ck");
    let out = run(&with_tiny(&["train", "--data", p(&data), "--out", p(&ck)]));
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    assert!(ck.join("checkpoints.json").exists());

    let inf = root.join("inf");
    let out = run(&with_tiny(&[
        "infer", "--data", p(&data), "--checkpoints", p(&ck), "--out", p(&inf),
    ]));
    assert_eq!(code(&out), 0, "infer failed: {}", stderr(&out));
    let rendered = std::fs::read_dir(&inf)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_tryon.png")
        })
        .count();
    assert!(rendered > 0, "no try-on images were written");

    let ev = root.join("ev");
    let out = run(&with_tiny(&[
        "eval", "--data", p(&data), "--checkpoints", p(&ck), "--out", p(&ev),
    ]));
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    assert!(ev.join("report.csv").exists());

    let ev2 = root.join("ev2");
    let out = run(&with_tiny(&[
        "eval", "--data", p(&data), "--checkpoints", p(&ck), "--out", p(&ev2), "--unpaired",
    ]));
    assert_eq!(code(&out), 0, "unpaired eval failed: {}", stderr(&out));
}

#[test]
fn missing_checkpoint_exits_two_and_names_the_file() {
    let root = fresh_dir("missing-ckpt");
    let data = tiny_dataset(&root);
    let ck = root.join("ck");
    let out = run(&with_tiny(&["train", "--data", p(&data), "--out", p(&ck)]));
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    std::fs::remove_file(ck.join("gmm.ck")).unwrap();

    let ev = root.join("ev");
    let out = run(&with_tiny(&[
        "eval", "--data", p(&data), "--checkpoints", p(&ck), "--out", p(&ev),
    ]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gmm.ck"), "stderr was: {}", stderr(&out));
}

#[test]
fn occupied_output_directory_requires_force() {
    let root = fresh_dir("occupied");
    let data = tiny_dataset(&root);
    let ck = root.join("ck");
    std::fs::create_dir_all(&ck).unwrap();
    std::fs::write(ck.join("occupant.txt"), "x").unwrap();

    let out = run(&with_tiny(&["train", "--data", p(&data), "--out", p(&ck)]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--force"), "stderr was: {}", stderr(&out));

    let out = run(&with_tiny(&["train", "--data", p(&data), "--out", p(&ck), "--force"]));
    assert_eq!(code(&out), 0, "forced train failed: {}", stderr(&out));
    assert!(!ck.join("occupant.txt").exists());
}

#[test]
fn diverging_training_exits_one() {
    let root = fresh_dir("diverge");
    let data = tiny_dataset(&root);
    let ck = root.join("ck");
    let mut args = with_tiny(&["train", "--data", p(&data), "--out", p(&ck)]);
    args.extend_from_slice(&["--set", "lr_seg=1e18", "--set", "seg_iters=4"]);
    let out = run(&args);
    assert_eq!(code(&out), 1, "stderr was: {}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "stderr was: {}", stderr(&out));
}
