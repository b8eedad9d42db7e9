use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "replicates = 2
evals_per_replicate = 2
eval_epochs = 3
mode = min-max
problem.dim = 3
pool.grid = 0.01, 0.1
pool.grid_epochs = 2
train.truncation = 5
train.stages = 10
train.meta_epochs = 2
train.validation_interval = 1
train.validation_seeds = 1
train.warmup_steps = 5
";

fn amalgam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amalgam")).args(args).output().unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    for cmd in ["train", "evaluate", "stability", "report"] {
        let o = amalgam(&[cmd, "--config", &cfg, "--out", &out_s, "--seed", "5"]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in ["effective.cfg", "train_log.csv", "evaluation.csv", "stability.csv", "report.svg", "replicate-1/policy.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let effective = fs::read_to_string(out.join("effective.cfg")).unwrap();
    assert!(effective.contains("seed = 5\n"));
    assert!(effective.contains(&format!("out = {out_s}\n")));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "train.meta_lr = fast\n");
    let o = amalgam(&["train", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train.meta_lr"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = amalgam(&["train", "--config", &dir.path().join("nope.cfg").display().to_string()]);
    assert!(!o.status.success());
    let cfg = config(dir.path(), &format!("{TINY}out = {}\n", dir.path().display()));
    let o = amalgam(&["evaluate", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("policy.ckpt"), "{}", stderr(&o));
    fs::write(dir.path().join("evaluation.csv"), "replicate,eval,epoch,train_loss,val_loss,diverged\n").unwrap();
    let o = amalgam(&["stability", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no data"), "{}", stderr(&o));
    assert!(!dir.path().join("stability.csv").exists());
}

#[test]
fn unresolvable_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("problem.kind = mnist-mlp\nproblem.dir = absent\nout = {}\n", dir.path().display());
    let cfg = config(dir.path(), &text);
    let o = Command::new(env!("CARGO_BIN_EXE_amalgam"))
        .args(["train", "--config", &cfg])
        .env("AMALGAM_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!amalgam(&[]).status.success());
    assert!(!amalgam(&["train"]).status.success());
    assert!(!amalgam(&["fly", "--config", "x"]).status.success());
}
