use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpelu::data::write_synthetic_cifar_dir;

fn mpelu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpelu"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "arch = plain:2:8:mpelu:channel:10\ndata = cifar\ndata_dir = data\ntrain_limit = 40\n\
         test_limit = 20\nbatch_size = 20\nepochs = 2\nschedule = 1:0.1\nout_dir = run\n{extra}"
    );
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn params_reports_count() {
    let o = mpelu(&["params", "--arch", "resnet:nopre:164"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let n: usize = out
        .lines()
        .find_map(|l| l.strip_prefix("parameters "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((n as f64 / 1.696e6 - 1.0).abs() < 0.01, "{n}");
}

#[test]
fn params_dump_lists_nodes() {
    let o = mpelu(&["params", "--arch", "resnet:mpelu-non-bottleneck:20", "--dump"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.contains("s1b1.act1\tactivation")), "{out}");
    let total = out.lines().find_map(|l| l.strip_prefix("total\t")).unwrap();
    let n = out.lines().find_map(|l| l.strip_prefix("parameters ")).unwrap();
    assert_eq!(total, n);
}

#[test]
fn residuals_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = mpelu(&[
        "residuals",
        "--alpha",
        "1",
        "--beta",
        "1",
        "--samples",
        "20000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "threshold,fraction");
    assert_eq!(lines.len(), 5);
    assert_eq!(stdout(&o), text);
}

#[test]
fn analyze_init_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.csv");
    let o = mpelu(&[
        "analyze-init",
        "--arch",
        "plain:5:16:mpelu",
        "--init",
        "taylor",
        "--out",
        out.to_str().unwrap(),
        "--batch",
        "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("layer_index,name,fan,init_std,act_mean,act_var\n"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn gradcheck_single_layer() {
    let o = mpelu(&[
        "gradcheck",
        "--arch",
        "resnet:mpelu-non-bottleneck:20",
        "--layer",
        "s1b1.act1",
        "--size",
        "8",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("s1b1.act1.alpha") && out.contains("s1b1.act1.beta"));
    assert!(!out.contains("stem.conv.weight"));
}

#[test]
fn exit_codes() {
    assert_eq!(
        mpelu(&["params", "--arch", "resnet:nope:20"]).status.code(),
        Some(1)
    );
    assert_eq!(mpelu(&["params"]).status.code(), Some(1));
    assert_eq!(mpelu(&["--help"]).status.code(), Some(0));
    let o = mpelu(&["train", "--config", "/definitely/missing.cfg"]);
    assert_eq!(o.status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar_dir(dir.path().join("data"), 40, 20, 0).unwrap();
    let cfg = write_config(dir.path(), "lr = 1e9\nweight_decay = 0\n");
    let o = mpelu(&["train", "--config", &cfg]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar_dir(dir.path().join("data"), 40, 20, 0).unwrap();
    let cfg = write_config(dir.path(), "");
    let o = mpelu(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("run/run_log.csv")).unwrap();
    assert_eq!(log, stdout(&o));
    assert_eq!(log.lines().count(), 4);
    assert!(dir.path().join("run/run_config.txt").exists());

    let ck = dir.path().join("run/final.ckpt");
    let o = mpelu(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("samples 20"));
    let err: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("top1_error "))
        .unwrap()
        .parse()
        .unwrap();
    let last: f64 = log
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(4)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(err, last);
}
