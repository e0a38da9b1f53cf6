use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cada::harness::RunConfig;
use cada::metrics::EvalReport;

fn cada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cada"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cada(args);
    assert!(
        out.status.success(),
        "cada {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--image-size", "32", "--n-source", "4", "--n-target", "4", "--n-test", "2", "--batch-size", "2",
    "--set", "base_channels=2", "--set", "disc_base_channels=2",
];

fn write_config(path: &Path, epochs: usize) {
    let cfg = RunConfig {
        epochs,
        checkpoint_every: 1,
        ..RunConfig::default()
    };
    cfg.save(path).unwrap();
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("c.toml");
    write_config(&config, 7);
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--config", config.to_str().unwrap(), "--epochs", "1", "--out", run.to_str().unwrap()];
    args.extend_from_slice(TINY);
    ok(&args);
    let saved = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(saved.epochs, 1);
    assert_eq!(saved.base_channels, 2);
    assert_eq!(saved.checkpoint_every, 1);
    assert!(run.join("ckpt_epoch0001.bin").exists());
    assert!(!run.join("ckpt_epoch0002.bin").exists());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2, "header plus one row per iteration");
}

#[test]
fn eval_reproduces_the_final_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--epochs", "1", "--variant", "cada_3d", "--out", run.to_str().unwrap()];
    args.extend_from_slice(TINY);
    ok(&args);

    let eval_dir = tmp.path().join("eval");
    ok(&[
        "eval",
        "--config", run.join("config.toml").to_str().unwrap(),
        "--checkpoint", run.join("ckpt_epoch0001.bin").to_str().unwrap(),
        "--out", eval_dir.to_str().unwrap(),
    ]);
    let trained = EvalReport::read_jsonl(&run.join("eval_final.jsonl")).unwrap();
    let evaluated = EvalReport::read_jsonl(&eval_dir.join("eval_final.jsonl")).unwrap();
    assert_eq!(trained, evaluated);
    assert_eq!(
        fs::read(run.join("masks/pred_00001.png")).unwrap(),
        fs::read(eval_dir.join("masks/pred_00001.png")).unwrap()
    );
}

#[test]
fn synth_then_train_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut args = vec!["synth", "--out", data.to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("wrote 10 samples"), "{stdout}");
    assert!(data.join("manifest.txt").exists());

    let run = tmp.path().join("run");
    let mut args = vec![
        "train", "--variant", "source_only", "--epochs", "1",
        "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.starts_with("final dice_cup"), "{stdout}");
}

#[test]
fn bad_input_fails_cleanly() {
    for args in [
        vec!["train", "--no-such-flag"],
        vec!["train", "--variant", "nonsense"],
        vec!["train", "--set", "ema_alpha=2.0"],
        vec!["train", "--set", "not_a_field=1"],
        vec!["train", "--set", "missing_equals"],
        vec!["eval", "--checkpoint", "/nonexistent/ckpt.bin"],
        vec!["frobnicate"],
    ] {
        let out = cada(&args);
        assert!(!out.status.success(), "cada {args:?} should fail");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    }
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let mut args = vec![
        "ablate", "--epochs", "1", "--seeds", "0,1", "--variants", "full,source_only",
        "--out", out.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("source_only"), "{stdout}");
    let summary = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
    let runs = fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    assert!(out.join("full/seed1/eval_final.jsonl").exists());
}
