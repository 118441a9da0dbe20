use std::path::Path;

use mitopeft::config::RunConfig;
use mitopeft::pipeline::{cmd_split, cmd_train, CONFIG_ECHO, PLAN_FILE};
use mitopeft::split::SplitStrategy;
use mitopeft::synth::{generate, SynthConfig};
use mitopeft::{Error, Exec};

fn config(dir: &Path, strategy: &str, k: usize) -> RunConfig {
    let text = format!(
        "manifest = \"data/manifest.csv\"\nbackbone = \"tiny-test\"\noutput_dir = \"out\"\n\
         [split]\nstrategy = \"{strategy}\"\nk = {k}\n[preprocess]\nstrategy = \"resize\"\n"
    );
    RunConfig::from_toml(&text, dir).unwrap()
}

fn dataset(dir: &Path, n_crops: usize, n_images: usize, n_domains: usize) {
    let cfg = SynthConfig { n_crops, n_images, n_domains, crop_size: 16, ..SynthConfig::default() };
    generate(dir.join("data"), &cfg).unwrap();
}

#[test]
fn group_split_over_nine_domains() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 36, 18, 9);
    let summary = cmd_split(&config(dir.path(), "group", 3)).unwrap();
    assert_eq!(summary.strategy, SplitStrategy::Group);
    assert_eq!(summary.folds.len(), 3);
    assert!(summary.folds.iter().all(|f| f.domains.len() == 3));
    let out = dir.path().join("out");
    assert!(out.join(PLAN_FILE).exists());
    assert!(out.join(CONFIG_ECHO).exists());
}

#[test]
fn random_split_of_six_images() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 12, 6, 2);
    let summary = cmd_split(&config(dir.path(), "random", 3)).unwrap();
    let sizes: Vec<usize> = summary.folds.iter().map(|f| f.images).collect();
    assert_eq!(sizes, vec![2, 2, 2]);
}

#[test]
fn too_many_group_folds_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 12, 6, 3);
    let err = cmd_split(&config(dir.path(), "group", 5)).unwrap_err();
    assert!(matches!(err, Error::TooFewDomains { have: 3, k: 5 }), "{err}");
}

#[test]
fn split_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 24, 12, 3);
    let cfg = config(dir.path(), "random", 3);
    cmd_split(&cfg).unwrap();
    let first = std::fs::read(dir.path().join("out").join(PLAN_FILE)).unwrap();
    cmd_split(&cfg).unwrap();
    assert_eq!(std::fs::read(dir.path().join("out").join(PLAN_FILE)).unwrap(), first);
}

#[test]
fn stale_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 24, 12, 3);
    cmd_split(&config(dir.path(), "random", 3)).unwrap();
    let mut changed = config(dir.path(), "random", 3);
    changed.split.seed = 99;
    assert!(matches!(cmd_train(&changed, Some(0), Exec::default()), Err(Error::PlanMismatch(_))));
    assert!(matches!(cmd_train(&config(dir.path(), "random", 3), Some(7), Exec::default()), Err(Error::Config(_))));
}
