//! The `mvdistill` binary: exit codes and output files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvdistill"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.mvds", "b.mvds"] {
        let o = mvdistill(dir.path(), &["--seed", "4", "synth", "--classes", "3", "--out", name]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = mvdistill(dir.path(), &["--seed", "5", "synth", "--classes", "3", "--out", "c.mvds"]);
    assert_eq!(o.status.code(), Some(0));
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.mvds"), read("b.mvds"));
    assert_ne!(read("a.mvds"), read("c.mvds"));
}

#[test]
fn configuration_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvdistill(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.train"));

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "train.epochz = 3\n").unwrap();
    let o = mvdistill(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epochz"));

    fs::write(&cfg, "data.train = /no/such/file.mvds\n").unwrap();
    let o = mvdistill(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.train"));

    let o = mvdistill(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("junk.mvds");
    fs::write(&data, b"MVDS not really").unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, format!("data.train = {}\n", data.display())).unwrap();
    let o = mvdistill(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_then_eval_reproduces_the_last_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(mvdistill(d, &["synth", "--classes", "3", "--per-class", "4", "--out", "t.mvds"]).status.code(), Some(0));
    assert_eq!(
        mvdistill(d, &["synth", "--classes", "3", "--per-class", "4", "--validation", "--out", "v.mvds"]).status.code(),
        Some(0)
    );
    let cfg = d.join("run.txt");
    fs::write(
        &cfg,
        format!(
            "data.train = {}\ndata.val = {}\ntrain.epochs = 2\ntrain.draws_per_class = 2\ntrain.timing = off\n",
            d.join("t.mvds").display(),
            d.join("v.mvds").display()
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let o = mvdistill(d, &["--config", c, "train"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "epoch,loss_total,loss_s,loss_p,loss_f,loss_hmd,top1_full,top5_full,top1_k1,top1_k2,top1_k3,epoch_seconds"
    );
    let echoed = fs::read_to_string(d.join("effective_config.txt")).unwrap();
    assert!(echoed.contains("train.epochs = 2"));

    let ckpt = d.join("model.mvwm");
    let val = d.join("v.mvds");
    let o = mvdistill(
        d,
        &["--config", c, "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", val.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eval = fs::read_to_string(d.join("eval.csv")).unwrap();
    let strip = |line: &str| line.split(',').skip(1).collect::<Vec<_>>().join(",");
    assert_eq!(strip(eval.lines().nth(1).unwrap()), strip(lines[2]));
}
