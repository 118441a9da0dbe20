//! Fold training: balanced sampling, BCE-with-logits, Adam, plateau LR
//! schedule and early stopping on validation balanced accuracy.

use std::collections::BTreeSet;

use log::{info, warn};
use ndarray::Array3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CropSet;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::manifest::Label;
use crate::metrics::{confusion_at_threshold, ConfusionCounts};
use crate::preprocess::{InputPipeline, Phase};
use crate::zoo::{Model, TrainableState};

/// Threshold for the validation metric monitored during training.
pub const MONITOR_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub sched_factor: f64,
    pub sched_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-2,
            batch_size: 8,
            sched_factor: 0.5,
            sched_patience: 3,
            early_stop_patience: 10,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.sched_factor > 0.0 && self.sched_factor < 1.0) {
            return bad("sched_factor must lie in (0, 1)");
        }
        if self.sched_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive");
        }
        if self.sched_patience >= self.early_stop_patience {
            return bad("sched_patience must be smaller than early_stop_patience");
        }
        Ok(())
    }
}

/// `1 / count(label)` per sample.
pub fn compute_sample_weights(labels: &[Label]) -> Result<Vec<f64>> {
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("sample weighting needs both classes"));
    }
    Ok(labels
        .iter()
        .map(|l| 1.0 / if l.is_positive() { pos } else { neg } as f64)
        .collect())
}

/// Sampling with replacement, proportional to per-sample weights.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        WeightedIndex::new(weights)
            .map(|dist| Self { dist })
            .map_err(|e| Error::Config(format!("invalid sampling weights: {e}")))
    }

    pub fn balanced(labels: &[Label]) -> Result<Self> {
        Self::new(&compute_sample_weights(labels)?)
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| self.dist.sample(rng)).collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-(2y-1)·z))` without overflow.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean BCE-with-logits over a batch.
pub fn bce_with_logits_loss(logits: &[f64], labels: &[Label]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch { left: logits.len(), right: labels.len() });
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, l)| bce_with_logits(z, l.as_u8() as f64))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// ReduceLROnPlateau in maximize mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: Option<f64>,
    pub stale: usize,
    pub factor: f64,
    pub patience: usize,
}

impl PlateauState {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, best: None, stale: 0, factor, patience }
    }
}

/// A strict increase resets the counter; once `patience` stale epochs have
/// accumulated the rate is multiplied by `factor` and the counter restarts.
pub fn lr_plateau_step(mut s: PlateauState, metric: f64) -> PlateauState {
    if s.best.is_none_or(|b| metric > b) {
        s.best = Some(metric);
        s.stale = 0;
    } else {
        s.stale += 1;
        if s.stale >= s.patience {
            s.lr *= s.factor;
            s.stale = 0;
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improve: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self { best_metric: None, best_epoch: None, epochs_since_improve: 0, patience }
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == Some(epoch)
    }
}

/// Returns the updated state and whether training should stop: true once
/// `patience` consecutive epochs pass without a strict improvement.
pub fn early_stop_update(mut s: EarlyStopState, metric: f64, epoch: usize) -> (EarlyStopState, bool) {
    if s.best_metric.is_none_or(|b| metric > b) {
        s.best_metric = Some(metric);
        s.best_epoch = Some(epoch);
        s.epochs_since_improve = 0;
    } else {
        s.epochs_since_improve += 1;
    }
    let stop = s.epochs_since_improve >= s.patience;
    (s, stop)
}

/// Adam with L2 penalty added to the gradient (coupled weight decay).
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i] as f64 + weight_decay * params[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let step = lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            params[i] = (params[i] as f64 - step) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub loss: f64,
    pub balanced_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
}

impl ValMetrics {
    pub fn compute(probs: &[f64], logits: &[f64], labels: &[Label]) -> Result<Self> {
        let c: ConfusionCounts = confusion_at_threshold(probs, labels, MONITOR_THRESHOLD)?;
        Ok(Self {
            loss: bce_with_logits_loss(logits, labels)?,
            balanced_accuracy: c.balanced_accuracy().ok(),
            sensitivity: c.sensitivity().ok(),
            specificity: c.specificity().ok(),
            accuracy: c.accuracy()?,
        })
    }

    /// Balanced accuracy, or plain accuracy on a single-class validation set.
    pub fn monitored(&self) -> f64 {
        self.balanced_accuracy.unwrap_or(self.accuracy)
    }
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub lr: f64,
    pub val: ValMetrics,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: TrainableState,
    pub best_epoch: usize,
    pub best_val: ValMetrics,
    pub log: Vec<EpochRecord>,
    /// crop ids that contributed gradients
    pub consumed: BTreeSet<String>,
    pub steps: usize,
}

/// Eval-mode logits of prepared `C × H × W` tensors.
pub fn predict_logits(model: &Model, tensors: &[Array3<f32>], exec: Exec) -> Result<Vec<f64>> {
    exec.map(tensors, |t| model.logit(t.view()).map(|z| z as f64))
        .into_iter()
        .collect()
}

/// Sigmoid probabilities for every crop of `set`.
pub fn predict_probs(model: &Model, set: &CropSet, pipeline: &InputPipeline, exec: Exec) -> Result<Vec<f64>> {
    let tensors = set.eval_tensors(pipeline, exec)?;
    Ok(predict_logits(model, &tensors, exec)?.into_iter().map(sigmoid).collect())
}

pub fn evaluate(model: &Model, tensors: &[Array3<f32>], labels: &[Label], exec: Exec) -> Result<ValMetrics> {
    let logits = predict_logits(model, tensors, exec)?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    ValMetrics::compute(&probs, &logits, labels)
}

/// Trains `model` in place and returns the best-validation state. The model
/// is left holding the last epoch's weights.
pub fn fit(
    model: &mut Model,
    train: &CropSet,
    val: &CropSet,
    pipeline: &InputPipeline,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::EmptyInput);
    }
    let val_ids: BTreeSet<&str> = val.crop_ids.iter().map(String::as_str).collect();
    if let Some(id) = train.crop_ids.iter().find(|id| val_ids.contains(id.as_str())) {
        return Err(Error::PlanMismatch(format!("crop {id} is in both train and validation sets")));
    }
    let val_positive = val.labels.iter().filter(|l| l.is_positive()).count();
    if val_positive == 0 || val_positive == val.len() {
        warn!("validation set has a single class; monitoring accuracy instead of balanced accuracy");
    }
    let sampler = WeightedSampler::balanced(&train.labels)?;
    let val_tensors = val.eval_tensors(pipeline, exec)?;

    let mut plateau = PlateauState::new(cfg.lr, cfg.sched_factor, cfg.sched_patience);
    let mut stopper = EarlyStopState::new(cfg.early_stop_patience);
    let mut adam = Adam::new(model.trainable().num_params());
    let mut consumed = BTreeSet::new();
    let mut log = Vec::new();
    let mut steps = 0;

    // the untrained model is logged and kept only as a fallback for
    // max_epochs = 0; selection and scheduling start at epoch 1
    let baseline = evaluate(model, &val_tensors, &val.labels, exec)?;
    let mut best = model.trainable().clone();
    let mut best_val = baseline.clone();
    let rec = EpochRecord { epoch: 0, train_loss: None, lr: plateau.lr, val: baseline, improved: false };
    on_epoch(&rec);
    log.push(rec);

    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr;
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0, epoch as u64]));
        let order = sampler.draw(train.len(), &mut epoch_rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = exec.map_range(batch.len(), |j| {
                let i = batch[j];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64, step as u64, j as u64]));
                let img = pipeline.prepare(&train.images[i], Phase::Train, &mut rng)?;
                let chw = crate::data::to_chw_owned(img);
                model.forward_backward(chw.view(), train.labels[i], &mut rng)
            });
            let mut grad_sum: Option<Vec<f32>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let sample = r?;
                batch_loss += sample.loss;
                let flat = sample.grads.flatten();
                match grad_sum.as_mut() {
                    None => grad_sum = Some(flat),
                    Some(acc) => acc.iter_mut().zip(&flat).for_each(|(a, g)| *a += g),
                }
            }
            let n = batch.len() as f32;
            let grads: Vec<f32> = grad_sum.expect("non-empty batch").into_iter().map(|g| g / n).collect();
            let batch_loss = batch_loss / batch.len() as f64;
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss: batch_loss });
            }
            loss_sum += batch_loss * batch.len() as f64;
            for &i in batch {
                consumed.insert(train.crop_ids[i].clone());
            }
            let mut state = model.trainable().clone();
            let mut params = state.flatten();
            adam.step(&mut params, &grads, lr, cfg.weight_decay);
            state.assign_flat(&params)?;
            model.set_trainable(state)?;
            steps += 1;
        }

        let val_metrics = evaluate(model, &val_tensors, &val.labels, exec)?;
        let monitored = val_metrics.monitored();
        let (next, stop) = early_stop_update(stopper, monitored, epoch);
        stopper = next;
        plateau = lr_plateau_step(plateau, monitored);
        let improved = stopper.improved_at(epoch);
        if improved {
            best = model.trainable().clone();
            best_val = val_metrics.clone();
        }
        let rec = EpochRecord {
            epoch,
            train_loss: Some(loss_sum / order.len() as f64),
            lr,
            val: val_metrics,
            improved,
        };
        info!(
            "epoch {epoch}: loss {:.4} val bac {:.4} lr {lr:.2e}",
            rec.train_loss.unwrap_or(f64::NAN),
            monitored
        );
        on_epoch(&rec);
        log.push(rec);
        if stop {
            info!("early stop at epoch {epoch}");
            break;
        }
    }

    Ok(FitOutcome {
        best,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_val,
        log,
        consumed,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_reference_values() {
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_with_logits(50.0, 1.0) < 1e-20);
        assert!((bce_with_logits(50.0, 0.0) - 50.0).abs() < 1e-12);
        for z in [-1e4, 1e4] {
            assert!(bce_with_logits(z, 0.0).is_finite() && bce_with_logits(z, 1.0).is_finite());
        }
        assert!(bce_with_logits_loss(&[0.0], &[]).is_err());
    }

    #[test]
    fn weights_follow_inverse_class_count() {
        let mut labels = vec![Label::Nmf; 10_191];
        labels.extend(vec![Label::Amf; 1_748]);
        let w = compute_sample_weights(&labels).unwrap();
        assert_eq!(w[0], 1.0 / 10_191.0);
        assert_eq!(w[11_000], 1.0 / 1_748.0);
        let balanced = compute_sample_weights(&[Label::Nmf, Label::Amf, Label::Amf, Label::Nmf]).unwrap();
        assert!(balanced.iter().all(|&x| x == 0.5));
        assert!(matches!(compute_sample_weights(&[Label::Amf; 3]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn plateau_examples() {
        let run = |metrics: &[f64]| {
            metrics
                .iter()
                .scan(PlateauState::new(1.0, 0.5, 3), |s, &m| {
                    *s = lr_plateau_step(s.clone(), m);
                    Some(s.lr)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&[0.80, 0.79, 0.79, 0.79]), vec![1.0, 1.0, 1.0, 0.5]);
        assert!(run(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).iter().all(|&lr| lr == 1.0));
        let two = run(&[0.8, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7]);
        assert_eq!(*two.last().unwrap(), 0.25);
    }

    #[test]
    fn early_stop_examples() {
        let stop_epoch = |metrics: &[f64]| {
            let mut s = EarlyStopState::new(10);
            for (e, &m) in metrics.iter().enumerate() {
                let (next, stop) = early_stop_update(s, m, e + 1);
                s = next;
                if stop {
                    return Some(e + 1);
                }
            }
            None
        };
        assert_eq!(stop_epoch(&[0.7; 11]), Some(11));
        assert_eq!(stop_epoch(&[0.7; 10]), None);
        let mut reset = vec![0.7; 9];
        reset.push(0.8);
        reset.extend([0.8; 9]);
        assert_eq!(stop_epoch(&reset), None);
        let increasing: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(stop_epoch(&increasing), None);
    }

    #[test]
    fn adam_matches_hand_computation() {
        // first step moves each parameter by lr·sign(g) (up to eps)
        let mut p = vec![1.0f32, -2.0];
        let mut adam = Adam::new(2);
        adam.step(&mut p, &[0.5, -0.25], 0.1, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6);
        // coupled decay: zero gradient still moves a nonzero weight toward 0
        let mut q = vec![1.0f32];
        Adam::new(1).step(&mut q, &[0.0], 0.1, 0.01);
        assert!(q[0] < 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { sched_patience: 10, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
