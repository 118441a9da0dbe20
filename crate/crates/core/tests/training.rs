use std::collections::BTreeSet;

use mitopeft::checkpoint::Checkpoint;
use mitopeft::data::CropSet;
use mitopeft::lora::LoraConfig;
use mitopeft::manifest::Label;
use mitopeft::preprocess::{AugmentationConfig, InputPipeline, PreprocessConfig, Strategy};
use mitopeft::split::random_kfold;
use mitopeft::synth::{generate, SynthConfig};
use mitopeft::train::{evaluate, fit, FitOutcome, TrainConfig, WeightedSampler};
use mitopeft::zoo::{build_model, find_backbone, list_backbones, BackboneSpec, Model};
use mitopeft::Exec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    spec: BackboneSpec,
    pipeline: InputPipeline,
    train: CropSet,
    val: CropSet,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_crops: 36, n_images: 12, n_domains: 3, crop_size: 32, ..SynthConfig::default() };
    let m = generate(dir.path(), &cfg).unwrap();
    let spec = find_backbone(&list_backbones(), "tiny-test").unwrap();
    let preprocess = PreprocessConfig { strategy: Strategy::Resize, ..PreprocessConfig::default() };
    let all = CropSet::load_all(&m, &preprocess, Exec::default()).unwrap();
    let plan = random_kfold(&m, 3, 1).unwrap();
    let split = plan.fold_splits(&m).unwrap().remove(0);
    Fixture {
        pipeline: InputPipeline {
            preprocess,
            augmentation: AugmentationConfig::default(),
            mean: spec.norm_mean,
            std: spec.norm_std,
        },
        train: all.subset(&split.train),
        val: all.subset(&split.val),
        spec,
        _dir: dir,
    }
}

fn run(f: &Fixture, epochs: usize, exec: Exec) -> (Model, FitOutcome) {
    let mut model = build_model(&f.spec, &LoraConfig::default(), None, 4).unwrap();
    let cfg = TrainConfig { max_epochs: epochs, seed: 4, ..TrainConfig::default() };
    let out = fit(&mut model, &f.train, &f.val, &f.pipeline, &cfg, exec, |_| {}).unwrap();
    (model, out)
}

#[test]
fn fit_invariants() {
    let f = fixture();
    let untouched = build_model(&f.spec, &LoraConfig::default(), None, 4).unwrap();
    let before = untouched.base_checksum();
    let (model, out) = run(&f, 2, Exec::default());

    // only training crops produce gradients
    let val_ids: BTreeSet<_> = f.val.crop_ids.iter().cloned().collect();
    let train_ids: BTreeSet<_> = f.train.crop_ids.iter().cloned().collect();
    assert!(out.consumed.is_disjoint(&val_ids));
    assert!(out.consumed.is_subset(&train_ids));
    assert_eq!(out.steps, 2 * f.train.len().div_ceil(8));

    assert_eq!(model.base_checksum(), before);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().skip(1).all(|r| r.train_loss.unwrap().is_finite()));

    // the stored best metrics are reproduced by the reloaded checkpoint
    let ck = Checkpoint::capture(&model, &out.best, &f.pipeline, &TrainConfig::default());
    let ck = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    let reloaded = ck.into_model(&f.spec, model.backbone().clone()).unwrap();
    let tensors = f.val.eval_tensors(&f.pipeline, Exec::default()).unwrap();
    let again = evaluate(&reloaded, &tensors, &f.val.labels, Exec::default()).unwrap();
    assert!((again.loss - out.best_val.loss).abs() < 1e-6);
    assert_eq!(again.balanced_accuracy, out.best_val.balanced_accuracy);
}

#[test]
fn identical_seeds_identical_logs_in_both_modes() {
    let f = fixture();
    let (_, a) = run(&f, 1, Exec::Parallel);
    let (_, b) = run(&f, 1, Exec::Sequential);
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.flatten(), b.best.flatten());
}

#[test]
fn zero_epochs_returns_untrained_state() {
    let f = fixture();
    let (model, out) = run(&f, 0, Exec::default());
    let fresh = build_model(&f.spec, &LoraConfig::default(), None, 4).unwrap();
    assert_eq!(out.best, *fresh.trainable());
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.steps, 0);
    assert!(out.consumed.is_empty());
    let tensors = f.val.eval_tensors(&f.pipeline, Exec::default()).unwrap();
    assert_eq!(evaluate(&model, &tensors, &f.val.labels, Exec::default()).unwrap(), out.best_val);
}

#[test]
fn fold_sampler_is_balanced() {
    let f = fixture();
    let sampler = WeightedSampler::balanced(&f.train.labels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = sampler.draw(10_000, &mut rng);
    let pos = draws.iter().filter(|&&i| f.train.labels[i] == Label::Amf).count() as f64 / 1e4;
    assert!((0.45..=0.55).contains(&pos), "{pos}");
}
