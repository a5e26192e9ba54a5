//! Drives the `elc` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn elc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elc"))
        .args(args)
        .env_remove("ELC_SEED")
        .output()
        .expect("spawn elc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small pointwise-solvable setup: with D = 0 only beacon pixels carry
/// labels, and their class is written in their own colour.
const POINTWISE: &str = r#"
[model]
encoder = [{ out_channels = 4, pool = false }]
hidden_width = 3
scales = 1
head = ["C4", "Cn"]

[train]
epochs = 12
base_lr = 0.02
batch_size = 4

[synth]
height = 12
width = 12
distance = 0
samples = 24
beacons = 6

[data]
test_samples = 8
"#;

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&elc(&["--help"])), 0);
    assert_eq!(code(&elc(&["no-such-command"])), 1);
    assert_eq!(code(&elc(&["impact", "--out", "x.csv", "--steps", "0"])), 1);
    assert_eq!(code(&elc(&["impact", "--out", "x.csv", "--elc", "s=two"])), 1);
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nnot_a_key = 1\n").unwrap();
    let out = elc(&["--config", path(&cfg), "gradcheck"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn impact_writes_one_row_per_step_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = elc(&[
            "impact", "--out", path(p), "--family", "gru", "--elc", "s=5,k=1", "--steps", "40", "--trials", "3",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(&a).unwrap();
    assert_eq!(csv.lines().count(), 41);
    assert!(csv.starts_with("t,mean_F,normalized_F"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let meta = fs::read_to_string(dir.path().join("a.csv.meta")).unwrap();
    assert!(meta.contains("family=gru-elc-1d") && meta.contains("stride=5"));
}

#[test]
fn seed_flag_and_environment_agree() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |p: &Path| vec!["impact".to_string(), "--out".into(), path(p).into(), "--steps".into(), "5".into(), "--trials".into(), "2".into()];
    let mut flag = args(&a);
    flag.extend(["--seed".into(), "7".into()]);
    assert_eq!(code(&elc(&flag.iter().map(String::as_str).collect::<Vec<_>>())), 0);
    let env = Command::new(env!("CARGO_BIN_EXE_elc"))
        .args(args(&b))
        .env("ELC_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&env), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gradcheck_passes_and_injected_fault_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("g.csv");
    let ok = elc(&["gradcheck", "--scope", "cells", "--csv", path(&csv)]);
    assert_eq!(code(&ok), 0);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("case,input"));
    let bad = elc(&["gradcheck", "--scope", "cells", "--inject-fault", "tanh"]);
    assert_eq!(code(&bad), 3);
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, POINTWISE).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let synth = elc(&["--config", path(&cfg), "synth", "--out", path(&data), "--samples", "8"]);
    assert_eq!(code(&synth), 0);
    let manifest = data.join("manifest.tsv");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 8);

    let train = elc(&["--config", path(&cfg), "train", "--out", path(&run), "--epoch-checkpoints"]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 13);
    assert!(run.join("epoch-012.ckpt").exists());
    let ckpt = run.join("final.ckpt");

    let eval = elc(&["eval", "--checkpoint", path(&ckpt), "--manifest", path(&manifest)]);
    assert_eq!(code(&eval), 0);
    let text = stdout(&eval);
    let global: f64 = text
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.trim_end_matches('%').parse().ok())
        .unwrap_or_else(|| panic!("unexpected eval output: {text}"));
    assert!(global > 99.0, "D=0 should be solved pointwise, got {text}");

    // Identical config and seed give byte-identical artefacts.
    let again = dir.path().join("again");
    assert_eq!(code(&elc(&["--config", path(&cfg), "train", "--out", path(&again)])), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("final.ckpt")).unwrap());
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.csv")).unwrap());
}

#[test]
fn untrained_model_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, POINTWISE.replace("base_lr = 0.02", "base_lr = 0.0").replace("distance = 0", "distance = 4")).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&elc(&["--config", path(&cfg), "train", "--out", path(&run)])), 0);
    let eval = elc(&["--config", path(&cfg), "eval", "--checkpoint", path(&run.join("final.ckpt"))]);
    assert_eq!(code(&eval), 0);
    let text = stdout(&eval);
    let class_avg: f64 = text
        .split_whitespace()
        .nth(3)
        .and_then(|s| s.trim_end_matches('%').parse().ok())
        .unwrap_or_else(|| panic!("unexpected eval output: {text}"));
    assert!((30.0..=70.0).contains(&class_avg), "{text}");
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, POINTWISE.replace("base_lr = 0.02", "base_lr = 0.0")).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&elc(&["--config", path(&cfg), "train", "--out", path(&run)])), 0);
    let ckpt = run.join("final.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let eval = elc(&["--config", path(&cfg), "eval", "--checkpoint", path(&ckpt)]);
    assert_eq!(code(&eval), 2);
    let missing = elc(&["eval", "--checkpoint", path(&dir.path().join("nope.ckpt"))]);
    assert_eq!(code(&missing), 2);
}
