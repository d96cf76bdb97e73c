use std::fs;
use std::path::Path;

use super::{dispatch, Config};
use crate::trainer::GRAD_SUITE;

fn run(ws: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["mmsearch".to_string(), "--workspace".into(), ws.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    dispatch(argv)
}

const TINY: &[&str] = &[
    "--set", "classes=6",
    "--set", "items=3",
    "--set", "epochs1=1",
    "--set", "epochs2=1",
    "--set", "epochs3=1",
    "--set", "token_dim=16",
    "--set", "heads=2",
    "--set", "out_dim=16",
    "--set", "eval_depth=10",
];

fn tiny(ws: &Path, args: &[&str]) -> i32 {
    let mut all: Vec<&str> = TINY.to_vec();
    all.extend_from_slice(args);
    run(ws, &all)
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["gradcheck", "--seed", "7"]), 0);
    assert_eq!(GRAD_SUITE.len(), 4);
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for ws in [a.path(), b.path()] {
        assert_eq!(run(ws, &["gen-data", "--classes", "10", "--items", "5", "--seed", "1"]), 0);
    }
    let mut names: Vec<_> = fs::read_dir(a.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let x = fs::read(a.path().join("data").join(&name)).unwrap();
        let y = fs::read(b.path().join("data").join(&name)).unwrap();
        assert!(x == y, "{name:?} differs between runs");
    }
}

#[test]
fn config_layers_and_echo() {
    let mut cfg = Config::default();
    cfg.merge_text("# tiny run\nclasses = 4\nitems=2  # inline\n").unwrap();
    cfg.set_pair("items=3").unwrap();
    let echo = cfg.echo();
    assert!(echo.contains("classes = 4\n"), "{echo}");
    assert!(echo.contains("items = 3\n"), "{echo}");
    assert!(echo.contains("seed = 0\n"), "{echo}");
    assert_eq!(cfg.get::<usize>("classes").unwrap(), 4);
    assert_eq!(cfg.list("weight_grid").unwrap(), vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0]);
    let mut back = Config::default();
    back.merge_text(&echo).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn config_rejects_bad_input() {
    let mut cfg = Config::default();
    assert!(matches!(cfg.set("colour", "blue"), Err(crate::Error::Usage(_))));
    assert!(matches!(cfg.set_pair("classes"), Err(crate::Error::Usage(_))));
    assert!(matches!(cfg.merge_text("classes = 4\nbogus = 1\n"), Err(crate::Error::Usage(m)) if m.contains("line 2")));
    cfg.set("classes", "many").unwrap();
    assert!(matches!(cfg.get::<usize>("classes"), Err(crate::Error::Usage(_))));
}

#[test]
fn config_file_flag() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    fs::write(&path, "classes = 4\nitems = 2\n").unwrap();
    assert_eq!(run(dir.path(), &["--config", path.to_str().unwrap(), "gen-data"]), 0);
    assert_eq!(run(dir.path(), &["--config", "/nonexistent/run.conf", "gen-data"]), 1);
}

#[test]
fn eval_without_an_index_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["eval"]), 2);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]), 1);
    assert_eq!(run(dir.path(), &["--set", "colour=blue", "gen-data"]), 1);
    assert_eq!(run(dir.path(), &["train", "4"]), 1);
    assert_eq!(run(dir.path(), &["daily-job", "--day", "yesterday"]), 1);
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]), 0);
}

#[test]
fn stage_two_needs_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tiny(dir.path(), &["train", "2"]), 2);
}

#[test]
fn golden_path_from_a_clean_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    for args in [&["train", "all"][..], &["build-index"], &["eval"], &["daily-job"], &["daily-job"]] {
        assert_eq!(tiny(ws, args), 0, "{args:?}");
    }
    for stage in 1..=3 {
        assert!(ws.join(format!("model/stage{stage}.ckpt")).exists());
    }
    assert!(ws.join("model/model.ckpt").exists());
    assert!(ws.join("index/i2i.snap").exists());
    assert!(ws.join("index/miem.snap").exists());
    let csv = fs::read_to_string(ws.join("reports/eval.csv")).unwrap();
    assert!(csv.starts_with("Model,Category Accuracy,Recall@1,Recall@5,Recall@10,Recall@50,Recall@100"));
    for row in ["I2I,", "MIEM,", "MIEM+I2I,"] {
        assert!(csv.contains(row), "{row} missing from\n{csv}");
    }
    assert_eq!(fs::read_dir(ws.join("daily")).unwrap().count(), 2);
}

#[test]
fn training_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for ws in [a.path(), b.path()] {
        assert_eq!(tiny(ws, &["train", "1"]), 0);
    }
    let x = fs::read(a.path().join("model/model.ckpt")).unwrap();
    let y = fs::read(b.path().join("model/model.ckpt")).unwrap();
    assert!(x == y);
}
