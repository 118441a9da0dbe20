//! The command pipeline: split → train → evaluate → predict → report.
//! Commands talk to each other only through files in the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, SplitRef};
use crate::config::RunConfig;
use crate::data::CropSet;
use crate::ensemble::{
    build_records, export_predictions, load_predictions, validate_predictions, Aggregation, FoldEnsemble,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::manifest::{class_counts, load_manifest, CropRecord, Label, Manifest};
use crate::metrics::{domainwise_report, optimize_threshold, MetricsReport, SweepMode, ThresholdChoice};
use crate::preprocess::{apply_strategy, load_image, InputPipeline};
use crate::split::{group_kfold, random_kfold, stratified_random_kfold, verify_no_leakage, SplitPlan, SplitStrategy};
use crate::train::{evaluate, fit, EpochRecord, ValMetrics, MONITOR_THRESHOLD};
use crate::vit::VitBackbone;
use crate::zoo::{build_on, load_base, BackboneSpec, Model};

pub const CONFIG_ECHO: &str = "run_config.toml";
pub const PLAN_FILE: &str = "split_plan.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const EVALUATION_TXT: &str = "evaluation.txt";
pub const OOF_FILE: &str = "oof_predictions.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Thresholds always reported next to the optimized one.
pub const FIXED_THRESHOLDS: [f64; 2] = [0.5, 0.6];

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Echoes the effective configuration into the output directory.
fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write(&out.join(CONFIG_ECHO), cfg.to_toml()?)
}

fn make_plan(cfg: &RunConfig, m: &Manifest) -> Result<SplitPlan> {
    let s = &cfg.split;
    match (s.strategy, s.stratified) {
        (SplitStrategy::Random, false) => random_kfold(m, s.k, s.seed),
        (SplitStrategy::Random, true) => stratified_random_kfold(m, s.k, s.seed),
        (SplitStrategy::Group, _) => group_kfold(m, s.k, s.seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub images: usize,
    pub crops: usize,
    pub amf: usize,
    pub nmf: usize,
    pub domains: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub strategy: SplitStrategy,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldSummary>,
}

impl SplitSummary {
    pub fn to_table(&self) -> String {
        let mut s = format!("{} split, k = {}, seed = {}\n", self.strategy, self.k, self.seed);
        let _ = writeln!(s, "{:>4}  {:>6}  {:>6}  {:>5}  {:>5}  domains", "fold", "images", "crops", "AMF", "NMF");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:>4}  {:>6}  {:>6}  {:>5}  {:>5}  {}",
                f.fold,
                f.images,
                f.crops,
                f.amf,
                f.nmf,
                f.domains.join(",")
            );
        }
        s
    }
}

fn summarize(plan: &SplitPlan, m: &Manifest) -> Result<SplitSummary> {
    let crop_folds = plan.crop_folds(m)?;
    let image_counts = plan.fold_sizes();
    let domains = plan.fold_domains();
    let folds = (0..plan.k)
        .map(|j| {
            let members: Vec<&CropRecord> = m
                .records()
                .iter()
                .zip(&crop_folds)
                .filter(|(_, &f)| f == j)
                .map(|(r, _)| r)
                .collect();
            let amf = members.iter().filter(|r| r.label.is_positive()).count();
            FoldSummary {
                fold: j,
                images: image_counts[j],
                crops: members.len(),
                amf,
                nmf: members.len() - amf,
                domains: domains[j].iter().cloned().collect(),
            }
        })
        .collect();
    Ok(SplitSummary { strategy: plan.strategy, k: plan.k, seed: plan.seed, folds })
}

/// Builds the fold plan, audits it and writes `split_plan.toml`.
pub fn cmd_split(cfg: &RunConfig) -> Result<SplitSummary> {
    cfg.validate(true)?;
    let out = cfg.output_path()?;
    let m = load_manifest(cfg.manifest_path())?;
    let plan = make_plan(cfg, &m)?;
    let audit = verify_no_leakage(&plan, &m)?;
    if !audit.is_clean() {
        return Err(Error::PlanMismatch(format!("fresh plan has {} leakage violations", audit.violation_count())));
    }
    echo_config(cfg, &out)?;
    plan.save(out.join(PLAN_FILE))?;
    summarize(&plan, &m)
}

/// Loads the plan written by `split`, or creates it when absent, and checks
/// it against the current config and manifest.
fn load_or_make_plan(cfg: &RunConfig, m: &Manifest, out: &Path) -> Result<(SplitPlan, String)> {
    let path = out.join(PLAN_FILE);
    if !path.exists() {
        info!("no split plan in {}; creating one", out.display());
        cmd_split(cfg)?;
    }
    let text = read_to_string(&path)?;
    let plan = SplitPlan::from_toml(&text)?;
    let s = &cfg.split;
    if (plan.strategy, plan.k, plan.seed, plan.stratified) != (s.strategy, s.k, s.seed, s.stratified && s.strategy == SplitStrategy::Random) {
        return Err(Error::PlanMismatch(format!(
            "{} was made with different split settings; rerun `split`",
            path.display()
        )));
    }
    let audit = verify_no_leakage(&plan, m)?;
    if !audit.is_clean() {
        return Err(Error::PlanMismatch(format!("plan has {} leakage violations", audit.violation_count())));
    }
    Ok((plan, sha256_hex(text)))
}

fn pipeline_for(cfg: &RunConfig, spec: &BackboneSpec) -> InputPipeline {
    InputPipeline {
        preprocess: cfg.preprocess.clone(),
        augmentation: cfg.augmentation.clone(),
        mean: spec.norm_mean,
        std: spec.norm_std,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val: ValMetrics,
    pub epochs_run: usize,
    pub optimizer_steps: usize,
    pub train_crops: usize,
    pub val_crops: usize,
    pub consumed_crops: usize,
    /// SHA-256 of the sorted, newline-joined crop ids that produced gradients.
    pub consumed_sha256: String,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
    pub trainable_params: usize,
    pub total_params: usize,
}

/// Trains one fold (or all folds when `fold` is `None`).
pub fn cmd_train(cfg: &RunConfig, fold: Option<usize>, exec: Exec) -> Result<Vec<TrainSummary>> {
    cfg.validate(true)?;
    let out = cfg.output_path()?;
    let m = load_manifest(cfg.manifest_path())?;
    let spec = cfg.backbone_spec()?;
    let backbone = Arc::new(load_base(&spec, cfg.weights_path().as_deref())?);
    let (plan, plan_sha) = load_or_make_plan(cfg, &m, &out)?;
    let folds: Vec<usize> = match fold {
        Some(j) if j >= plan.k => return Err(Error::Config(format!("fold {j} out of range for k = {}", plan.k))),
        Some(j) => vec![j],
        None => (0..plan.k).collect(),
    };
    echo_config(cfg, &out)?;
    let splits = plan.fold_splits(&m)?;
    let all = CropSet::load_all(&m, &cfg.preprocess, exec)?;
    let pipeline = pipeline_for(cfg, &spec);

    let mut summaries = Vec::new();
    for j in folds {
        let split = &splits[j];
        let train = all.subset(&split.train);
        let val = all.subset(&split.val);
        info!("fold {j}: {} train / {} val crops", train.len(), val.len());
        // each fold gets its own adapter/head initialization stream
        let seed = crate::exec::derive_seed(cfg.train.seed, &[j as u64]);
        let mut model = build_on(&spec, &cfg.lora, backbone.clone(), seed)?;
        let before = model.base_checksum();
        let mut log_lines = String::new();
        let train_cfg = crate::train::TrainConfig { seed, ..cfg.train.clone() };
        let outcome = fit(&mut model, &train, &val, &pipeline, &train_cfg, exec, |r: &EpochRecord| {
            log_lines.push_str(&serde_json::to_string(r).expect("epoch records serialize"));
            log_lines.push('\n');
        })?;
        let after = model.base_checksum();
        if before != after {
            return Err(Error::Checkpoint("base weights changed during training".into()));
        }

        let mut ck = Checkpoint::capture(&model, &outcome.best, &pipeline, &cfg.train);
        ck.split = Some(SplitRef { plan_file: PLAN_FILE.into(), plan_sha256: plan_sha.clone(), fold: j });
        ck.epoch = outcome.best_epoch;
        ck.val_metrics = Some(outcome.best_val.clone());
        let dir = fold_dir(&out, j);
        write(&dir.join(CHECKPOINT_FILE), ck.to_json()?)?;
        write(&dir.join(TRAIN_LOG_FILE), log_lines)?;

        let consumed: Vec<&str> = outcome.consumed.iter().map(String::as_str).collect();
        let summary = TrainSummary {
            fold: j,
            best_epoch: outcome.best_epoch,
            best_val: outcome.best_val,
            epochs_run: outcome.log.len() - 1,
            optimizer_steps: outcome.steps,
            train_crops: train.len(),
            val_crops: val.len(),
            consumed_crops: consumed.len(),
            consumed_sha256: sha256_hex(consumed.join("\n")),
            base_checksum_before: before,
            base_checksum_after: after,
            trainable_params: model.trainable_param_count(),
            total_params: model.total_param_count(),
        };
        write(&dir.join(TRAIN_SUMMARY_FILE), to_json(&summary)?)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Checkpoints present in the output directory, by fold.
fn load_checkpoints(out: &Path, k: usize) -> Result<Vec<(usize, Checkpoint)>> {
    let mut found = Vec::new();
    for j in 0..k {
        let path = fold_dir(out, j).join(CHECKPOINT_FILE);
        if path.exists() {
            found.push((j, Checkpoint::load(&path)?));
        }
    }
    if found.is_empty() {
        return Err(Error::Checkpoint(format!("no fold checkpoints under {}; run `train` first", out.display())));
    }
    if found.len() < k {
        warn!("only {} of {k} fold checkpoints present", found.len());
    }
    Ok(found)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldEvaluation {
    pub fold: usize,
    pub val_crops: usize,
    pub best_epoch: usize,
    pub val_balanced_accuracy: Option<f64>,
    /// Largest difference between stored and recomputed validation metrics.
    pub reload_max_abs_diff: f64,
    pub threshold: Option<ThresholdChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub source: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sweep_mode: SweepMode,
    pub chosen_threshold: f64,
    pub pooled: ThresholdChoice,
    pub folds: Vec<FoldEvaluation>,
    pub reports: Vec<ThresholdReport>,
}

impl Evaluation {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "out-of-fold evaluation ({} sweep)", kebab(self.sweep_mode));
        let _ = writeln!(s, "{:>4}  {:>5}  {:>10}  {:>12}  {:>9}", "fold", "n", "best epoch", "val BAC@0.5", "τ* fold");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:>4}  {:>5}  {:>10}  {:>12}  {:>9}",
                f.fold,
                f.val_crops,
                f.best_epoch,
                f.val_balanced_accuracy.map_or("-".into(), |b| format!("{b:.4}")),
                f.threshold.as_ref().map_or("-".into(), |t| format!("{:.2}", t.threshold)),
            );
        }
        let _ = writeln!(s, "\nthreshold sweep (pooled BAC)");
        for (t, bac) in &self.pooled.sweep {
            let mark = if *t == self.chosen_threshold { "  <- chosen" } else { "" };
            let _ = writeln!(s, "  {t:.2}  {bac:.4}{mark}");
        }
        for r in &self.reports {
            let _ = writeln!(s, "\n[{}]", r.source);
            s.push_str(&r.report.to_table());
        }
        s
    }
}

fn kebab(mode: SweepMode) -> &'static str {
    match mode {
        SweepMode::Pooled => "pooled",
        SweepMode::PerFold => "per-fold",
    }
}

fn max_metric_diff(a: &ValMetrics, b: &ValMetrics) -> f64 {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    [
        (a.loss - b.loss).abs(),
        (a.accuracy - b.accuracy).abs(),
        opt(a.balanced_accuracy, b.balanced_accuracy),
        opt(a.sensitivity, b.sensitivity),
        opt(a.specificity, b.specificity),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

type Member = (usize, Checkpoint, Model);

fn load_members(cfg: &RunConfig, out: &Path, k: usize) -> Result<Vec<Member>> {
    let spec = cfg.backbone_spec()?;
    let backbone: Arc<VitBackbone> = Arc::new(load_base(&spec, cfg.weights_path().as_deref())?);
    let members = load_checkpoints(out, k)?
        .into_iter()
        .map(|(j, ck)| {
            let model = ck.into_model(&spec, backbone.clone())?;
            Ok((j, ck, model))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(members)
}

/// Out-of-fold evaluation of every trained fold, threshold selection and
/// domain-wise reports at the chosen, 0.5, 0.6 and any `extra` thresholds.
pub fn cmd_evaluate(cfg: &RunConfig, extra: &[f64], exec: Exec) -> Result<Evaluation> {
    cfg.validate(true)?;
    let out = cfg.output_path()?;
    let m = load_manifest(cfg.manifest_path())?;
    let (plan, _) = load_or_make_plan(cfg, &m, &out)?;
    let splits = plan.fold_splits(&m)?;
    let members = load_members(cfg, &out, plan.k)?;

    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    let mut oof = String::from("crop_id,fold,prob,label\n");
    let mut folds = Vec::new();
    for (j, ck, model) in &members {
        let pipeline = ck.pipeline();
        let set = CropSet::load(&m, &splits[*j].val, &ck.preprocess, exec)?;
        let tensors = set.eval_tensors(&pipeline, exec)?;
        let metrics = evaluate(model, &tensors, &set.labels, exec)?;
        let diff = ck.val_metrics.as_ref().map_or(0.0, |stored| max_metric_diff(stored, &metrics));
        if diff > 1e-6 {
            return Err(Error::Checkpoint(format!(
                "fold {j}: reloaded weights give different validation metrics (max diff {diff:e})"
            )));
        }
        let p = crate::train::predict_logits(model, &tensors, exec)?
            .into_iter()
            .map(crate::train::sigmoid)
            .collect::<Vec<_>>();
        let mut rows: Vec<(usize, f64)> = (0..set.len()).map(|i| (i, p[i])).collect();
        rows.sort_by(|a, b| set.crop_ids[a.0].cmp(&set.crop_ids[b.0]));
        for (i, pi) in rows {
            let _ = writeln!(oof, "{},{j},{pi:.6},{}", set.crop_ids[i], set.labels[i].as_u8());
        }
        let fold_choice = optimize_threshold(&p, &set.labels, &cfg.threshold).ok();
        folds.push(FoldEvaluation {
            fold: *j,
            val_crops: set.len(),
            best_epoch: ck.epoch,
            val_balanced_accuracy: metrics.balanced_accuracy,
            reload_max_abs_diff: diff,
            threshold: fold_choice,
        });
        probs.extend(p);
        labels.extend(set.labels.iter().copied());
        domains.extend(set.domains.iter().cloned());
    }

    let pooled = optimize_threshold(&probs, &labels, &cfg.threshold)?;
    let chosen_threshold = match cfg.threshold.mode {
        SweepMode::Pooled => pooled.threshold,
        SweepMode::PerFold => {
            let mut ts: Vec<f64> = folds.iter().filter_map(|f| f.threshold.as_ref().map(|t| t.threshold)).collect();
            if ts.is_empty() {
                return Err(Error::SingleClass("every validation fold"));
            }
            ts.sort_by(f64::total_cmp);
            // lower median stays on the grid
            ts[(ts.len() - 1) / 2]
        }
    };

    let mut wanted: Vec<(String, f64)> = vec![("optimized".into(), chosen_threshold)];
    wanted.extend(FIXED_THRESHOLDS.iter().map(|&t| ("fixed".to_string(), t)));
    wanted.extend(extra.iter().map(|&t| ("requested".to_string(), t)));
    let mut reports: Vec<ThresholdReport> = Vec::new();
    for (source, t) in wanted {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("threshold {t} must lie in (0, 1)")));
        }
        if reports.iter().any(|r| r.report.threshold == t) {
            continue;
        }
        let report = domainwise_report(&probs, &labels, &domains, t)?;
        reports.push(ThresholdReport { source: format!("{source} τ = {t:.2}"), report });
    }

    let eval = Evaluation { sweep_mode: cfg.threshold.mode, chosen_threshold, pooled, folds, reports };
    echo_config(cfg, &out)?;
    write(&out.join(EVALUATION_JSON), to_json(&eval)?)?;
    write(&out.join(EVALUATION_TXT), eval.to_text())?;
    write(&out.join(OOF_FILE), oof)?;
    Ok(eval)
}

/// Images to score.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictInput {
    /// The run's own manifest.
    RunManifest,
    Manifest(PathBuf),
    /// Every PNG/JPEG/TIFF in a directory; crop ids are file stems.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub members: usize,
    pub crops: usize,
    pub threshold: f64,
    pub predicted_amf: usize,
    pub aggregation: Aggregation,
}

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "tif" | "tiff")) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

/// Decision threshold: explicit value, then the config, then the evaluated
/// optimum, then 0.5.
fn resolve_threshold(cfg: &RunConfig, out: &Path, explicit: Option<f64>) -> Result<f64> {
    if let Some(t) = explicit.or(cfg.ensemble.threshold) {
        return Ok(t);
    }
    let path = out.join(EVALUATION_JSON);
    if path.exists() {
        let eval: Evaluation = serde_json::from_str(&read_to_string(&path)?)?;
        return Ok(eval.chosen_threshold);
    }
    warn!("no evaluation found and no threshold given; using {MONITOR_THRESHOLD}");
    Ok(MONITOR_THRESHOLD)
}

/// Fold-ensemble predictions written to `predictions.csv`.
pub fn cmd_predict(cfg: &RunConfig, input: &PredictInput, threshold: Option<f64>, exec: Exec) -> Result<PredictSummary> {
    cfg.validate(true)?;
    let out = cfg.output_path()?;
    let tau = resolve_threshold(cfg, &out, threshold)?;
    let members = load_members(cfg, &out, cfg.split.k)?;
    let first = &members[0].1;
    if members.iter().any(|(_, ck, _)| ck.preprocess != first.preprocess) {
        return Err(Error::Checkpoint("fold checkpoints disagree on preprocessing".into()));
    }
    let pipeline = first.pipeline();

    let set = match input {
        PredictInput::RunManifest => CropSet::load_all(&load_manifest(cfg.manifest_path())?, &first.preprocess, exec)?,
        PredictInput::Manifest(p) => CropSet::load_all(&load_manifest(p)?, &first.preprocess, exec)?,
        PredictInput::Directory(dir) => {
            let files = list_images(dir)?;
            let images = exec
                .map(&files, |(_, p)| apply_strategy(&load_image(p)?, &first.preprocess))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            CropSet {
                crop_ids: files.iter().map(|(id, _)| id.clone()).collect(),
                labels: vec![Label::Nmf; files.len()],
                domains: vec![String::new(); files.len()],
                images,
            }
        }
    };
    let tensors = set.eval_tensors(&pipeline, exec)?;
    let models = members.iter().map(|(_, _, m)| m.clone()).collect();
    let ensemble = FoldEnsemble::new(models, cfg.ensemble.aggregation, tau)?;
    let member_probs = ensemble.member_probs(&tensors, exec)?;
    let records = build_records(&set.crop_ids, &member_probs, ensemble.aggregation, tau)?;
    let path = out.join(PREDICTIONS_FILE);
    export_predictions(&records, &path)?;

    // exit status reflects the artifact, so check what was written
    let back = load_predictions(&path)?;
    validate_predictions(&back, Some(tau))?;
    if back.len() != records.len() {
        return Err(Error::Parse("predictions file lost records".into()));
    }
    Ok(PredictSummary {
        members: member_probs.len(),
        crops: records.len(),
        threshold: tau,
        predicted_amf: records.iter().filter(|r| r.label.is_positive()).count(),
        aggregation: ensemble.aggregation,
    })
}

/// Human-readable digest of everything in the output directory.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let out = cfg.output_path()?;
    let mut s = String::new();
    let _ = writeln!(s, "run: {}", out.display());
    let _ = writeln!(
        s,
        "backbone {} | LoRA r={} α={} dropout={} | split {} k={} seed={}",
        cfg.backbone,
        cfg.lora.rank,
        cfg.lora.alpha,
        cfg.lora.dropout,
        cfg.split.strategy,
        cfg.split.k,
        cfg.split.seed
    );

    if let Ok(m) = load_manifest(cfg.manifest_path()) {
        let counts = class_counts(&m);
        let _ = writeln!(
            s,
            "manifest: {} crops ({} NMF / {} AMF), {} source images",
            m.len(),
            counts[&Label::Nmf],
            counts[&Label::Amf],
            m.source_images().len()
        );
    }

    let plan_path = out.join(PLAN_FILE);
    if plan_path.exists() {
        let plan = SplitPlan::load(&plan_path)?;
        let _ = writeln!(s, "split plan: {} images in {} folds, sizes {:?}", plan.assignment.len(), plan.k, plan.fold_sizes());
    }

    let mut trained = BTreeMap::new();
    for j in 0..cfg.split.k {
        let p = fold_dir(&out, j).join(TRAIN_SUMMARY_FILE);
        if p.exists() {
            let t: TrainSummary = serde_json::from_str(&read_to_string(&p)?)?;
            trained.insert(j, t);
        }
    }
    if !trained.is_empty() {
        let _ = writeln!(s, "\ntraining");
        let _ = writeln!(s, "{:>4}  {:>6}  {:>10}  {:>11}  {:>9}", "fold", "epochs", "best epoch", "val BAC@0.5", "trainable");
        for t in trained.values() {
            let _ = writeln!(
                s,
                "{:>4}  {:>6}  {:>10}  {:>11}  {:>9}",
                t.fold,
                t.epochs_run,
                t.best_epoch,
                t.best_val.balanced_accuracy.map_or("-".into(), |b| format!("{b:.4}")),
                t.trainable_params
            );
        }
    }

    let eval_path = out.join(EVALUATION_JSON);
    if eval_path.exists() {
        let eval: Evaluation = serde_json::from_str(&read_to_string(&eval_path)?)?;
        let _ = writeln!(s);
        s.push_str(&eval.to_text());
    }

    let pred_path = out.join(PREDICTIONS_FILE);
    if pred_path.exists() {
        let preds = load_predictions(&pred_path)?;
        let amf = preds.iter().filter(|r| r.label.is_positive()).count();
        let k = preds.first().map_or(0, |r| r.member_probs.len());
        let _ = writeln!(s, "\npredictions: {} crops, {k} members, {amf} predicted AMF", preds.len());
    }
    write(&out.join(REPORT_FILE), &s)?;
    Ok(s)
}
