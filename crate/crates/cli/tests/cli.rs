use std::path::Path;
use std::process::{Command, Output};

use mitopeft::ensemble::{load_predictions, validate_predictions};

fn mitopeft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mitopeft"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("MITOPEFT_WEIGHTS_DIR")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, backbone: &str, strategy: &str, k: usize) {
    let text = format!(
        "manifest = \"data/manifest.csv\"\nbackbone = \"{backbone}\"\noutput_dir = \"run\"\n\n\
         [split]\nstrategy = \"{strategy}\"\nk = {k}\n\n[preprocess]\nstrategy = \"resize\"\n\n\
         [train]\nmax_epochs = 1\n"
    );
    std::fs::write(dir.join("run.toml"), text).unwrap();
}

fn synth(dir: &Path, crops: &str, images: &str, domains: &str) {
    let out = mitopeft(dir, &["synth", "--out", "data", "--crops", crops, "--images", images, "--domains", domains]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn backbones_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let out = mitopeft(dir.path(), &["backbones"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["virchow2", "tiny-test"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{text}");
    }
}

#[test]
fn group_split_with_too_few_domains_fails() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "12", "6", "3");
    write_config(dir.path(), "tiny-test", "group", 5);
    let out = mitopeft(dir.path(), &["split", "-c", "run.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("domain"), "{}", stderr(&out));
    assert!(!dir.path().join("run/split_plan.toml").exists());
}

#[test]
fn gated_backbone_without_weights_fails() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "12", "6", "3");
    write_config(dir.path(), "virchow2", "random", 3);
    assert!(mitopeft(dir.path(), &["split", "-c", "run.toml"]).status.success());
    let out = mitopeft(dir.path(), &["train", "-c", "run.toml", "--fold", "0"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("MITOPEFT_WEIGHTS_DIR"), "{}", stderr(&out));
}

#[test]
fn missing_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = mitopeft(dir.path(), &["split", "-c", "nope.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nope.toml"));
}

#[test]
fn train_then_predict_an_image_directory() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "16", "8", "2");
    write_config(dir.path(), "tiny-test", "random", 2);
    for args in [
        &["split", "-c", "run.toml"][..],
        &["train", "-c", "run.toml", "--exec", "sequential"],
        &["predict", "-c", "run.toml", "--images", "data/images", "--threshold", "0.5"],
        &["report", "-c", "run.toml"],
    ] {
        let out = mitopeft(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    let records = load_predictions(dir.path().join("run/predictions.csv")).unwrap();
    assert_eq!(records.len(), 16);
    assert!(records.iter().all(|r| r.member_probs.len() == 2));
    validate_predictions(&records, Some(0.5)).unwrap();
}
