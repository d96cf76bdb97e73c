//! Output of the built binary; exit codes and workspace effects are
//! covered by the cli unit tests.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmsearch(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmsearch"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .output()
        .expect("spawn mmsearch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gradcheck_passes_and_reports_every_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmsearch(dir.path(), &["gradcheck", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for name in mmsearch::trainer::GRAD_SUITE {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
    assert!(text.contains("ok: worst relative error"));
}

#[test]
fn effective_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# tiny run\nclasses = 4\nitems=2\n").unwrap();
    let out = mmsearch(dir.path(), &["--config", cfg.to_str().unwrap(), "--set", "items=3", "gen-data"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("classes = 4"), "{text}");
    assert!(text.contains("items = 3"), "{text}");
    assert!(text.contains("seed = 0"), "{text}");
}

#[test]
fn eval_without_an_index_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmsearch(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("first"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_command = mmsearch(dir.path(), &["frobnicate"]);
    assert_eq!(unknown_command.status.code(), Some(1));
    assert!(stderr(&unknown_command).contains("Usage"), "{}", stderr(&unknown_command));

    let unknown_key = mmsearch(dir.path(), &["--set", "colour=blue", "gen-data"]);
    assert_eq!(unknown_key.status.code(), Some(1));
    assert!(stderr(&unknown_key).contains("colour"));

    let bad_stage = mmsearch(dir.path(), &["train", "4"]);
    assert_eq!(bad_stage.status.code(), Some(1));

    let bad_day = mmsearch(dir.path(), &["daily-job", "--day", "yesterday"]);
    assert_eq!(bad_day.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmsearch(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    for cmd in ["gen-data", "train", "build-index", "daily-job", "serve", "eval", "gradcheck"] {
        assert!(stdout(&out).contains(cmd), "{cmd}");
    }
}
