//! Binary classification metrics with AMF as the positive class.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Label;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.positives() + self.negatives()
    }

    /// Recall of the positive (AMF) class.
    pub fn sensitivity(&self) -> Result<f64> {
        match self.positives() {
            0 => Err(Error::UndefinedMetric("sensitivity")),
            p => Ok(self.tp as f64 / p as f64),
        }
    }

    /// Recall of the negative (NMF) class.
    pub fn specificity(&self) -> Result<f64> {
        match self.negatives() {
            0 => Err(Error::UndefinedMetric("specificity")),
            n => Ok(self.tn as f64 / n as f64),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::UndefinedMetric("accuracy")),
            t => Ok((self.tp + self.tn) as f64 / t as f64),
        }
    }

    pub fn balanced_accuracy(&self) -> Result<f64> {
        Ok(balanced_accuracy_from(self.sensitivity()?, self.specificity()?))
    }
}

pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    c.balanced_accuracy()
}

pub fn balanced_accuracy_from(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity + specificity) / 2.0
}

fn check_aligned(probs: &[f64], labels: &[Label]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Predicts AMF iff `prob >= threshold`.
pub fn confusion_at_threshold(probs: &[f64], labels: &[Label], threshold: f64) -> Result<ConfusionCounts> {
    check_aligned(probs, labels)?;
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Area under the ROC curve via the rank-sum statistic with mid-ranks for
/// ties, i.e. P(score⁺ > score⁻) + ½·P(tie).
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::SingleClass("NMF"));
    }
    if n_neg == 0 {
        return Err(Error::SingleClass("AMF"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (doubled) mid-ranks of positives keeps everything integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i+j+2)/2
        let doubled_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k].is_positive()).count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R⁺ − p(p+1)/2, doubled
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
    pub mode: SweepMode,
}

/// Whether the threshold sweep runs on pooled out-of-fold predictions or per
/// fold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    #[default]
    Pooled,
    PerFold,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            grid_lo: 0.35,
            grid_hi: 0.75,
            grid_step: 0.05,
            mode: SweepMode::Pooled,
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_lo <= self.grid_hi) {
            return Err(Error::Config("grid_lo must not exceed grid_hi".into()));
        }
        if !(self.grid_step > 0.0) {
            return Err(Error::Config("grid_step must be positive".into()));
        }
        Ok(())
    }

    /// Candidate thresholds, ascending, rounded to 10 decimals so that e.g.
    /// 0.35 + 3·0.05 is exactly the double nearest 0.5.
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.grid_hi - self.grid_lo) / self.grid_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| round10(self.grid_lo + i as f64 * self.grid_step))
            .filter(|t| *t <= self.grid_hi + 1e-12)
            .collect()
    }
}

fn round10(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub balanced_accuracy: f64,
    /// BAC at every grid point, ascending threshold.
    pub sweep: Vec<(f64, f64)>,
}

/// Grid search for the BAC-maximizing threshold; ties go to the smallest τ.
pub fn optimize_threshold(probs: &[f64], labels: &[Label], policy: &ThresholdPolicy) -> Result<ThresholdChoice> {
    policy.validate()?;
    check_aligned(probs, labels)?;
    if !labels.iter().any(|l| l.is_positive()) {
        return Err(Error::SingleClass("NMF"));
    }
    if labels.iter().all(|l| l.is_positive()) {
        return Err(Error::SingleClass("AMF"));
    }
    let mut sweep = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for t in policy.grid() {
        let bac = confusion_at_threshold(probs, labels, t)?.balanced_accuracy()?;
        sweep.push((t, bac));
        if best.is_none_or(|(_, b)| bac > b) {
            best = Some((t, bac));
        }
    }
    let (threshold, balanced_accuracy) = best.ok_or(Error::EmptyInput)?;
    Ok(ThresholdChoice {
        threshold,
        balanced_accuracy,
        sweep,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub n: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub roc_auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

impl ReportRow {
    pub fn compute(name: impl Into<String>, probs: &[f64], labels: &[Label], threshold: f64) -> Result<Self> {
        let c = confusion_at_threshold(probs, labels, threshold)?;
        let sensitivity = c.sensitivity().ok();
        let specificity = c.specificity().ok();
        Ok(Self {
            name: name.into(),
            n: c.total(),
            n_positive: c.positives(),
            n_negative: c.negatives(),
            roc_auc: roc_auc(probs, labels).ok(),
            accuracy: c.accuracy().ok(),
            sensitivity,
            specificity,
            balanced_accuracy: sensitivity.zip(specificity).map(|(a, b)| balanced_accuracy_from(a, b)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    /// One row per domain (sorted by id) followed by the pooled overall row.
    pub rows: Vec<ReportRow>,
}

pub const OVERALL: &str = "Overall";

impl MetricsReport {
    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("report always has an overall row")
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned text table: Domain, ROC AUC, Accuracy, Sensitivity,
    /// Specificity, Balanced Accuracy. Undefined entries print as `-`.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "threshold = {:.4}", self.threshold);
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>8}  {:>11}  {:>11}  {:>17}  {:>6}",
            "Domain", "ROC AUC", "Accuracy", "Sensitivity", "Specificity", "Balanced Accuracy", "n"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>8}  {:>11}  {:>11}  {:>17}  {:>6}",
                r.name,
                fmt(r.roc_auc),
                fmt(r.accuracy),
                fmt(r.sensitivity),
                fmt(r.specificity),
                fmt(r.balanced_accuracy),
                r.n
            );
        }
        out
    }
}

/// Per-domain rows plus an overall row computed on the pooled samples.
pub fn domainwise_report(probs: &[f64], labels: &[Label], domains: &[String], threshold: f64) -> Result<MetricsReport> {
    check_aligned(probs, labels)?;
    if domains.len() != probs.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: domains.len(),
        });
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
    for ((&p, &y), d) in probs.iter().zip(labels).zip(domains) {
        let g = groups.entry(d.as_str()).or_default();
        g.0.push(p);
        g.1.push(y);
    }
    let mut rows = groups
        .into_iter()
        .map(|(d, (p, y))| ReportRow::compute(d, &p, &y, threshold))
        .collect::<Result<Vec<_>>>()?;
    rows.push(ReportRow::compute(OVERALL, probs, labels, threshold)?);
    Ok(MetricsReport { threshold, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&b| Label::from_bool(b == 1)).collect()
    }

    fn pairwise_auc(scores: &[f64], y: &[Label]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, yi) in y.iter().enumerate() {
            for (j, yj) in y.iter().enumerate() {
                if yi.is_positive() && !yj.is_positive() {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn confusion_examples() {
        let c = confusion_at_threshold(&[0.9, 0.1], &labels(&[1, 0]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        let c = confusion_at_threshold(&[0.55], &labels(&[1]), 0.6).unwrap();
        assert_eq!(c.fn_, 1);
        let probs = [0.0, 0.3, 1.0];
        let y = labels(&[0, 1, 1]);
        let all_pos = confusion_at_threshold(&probs, &y, 0.0).unwrap();
        assert_eq!(all_pos.tp + all_pos.fp, 3);
        let all_neg = confusion_at_threshold(&probs, &y, 1.01).unwrap();
        assert_eq!(all_neg.tn + all_neg.fn_, 3);
        assert!(matches!(
            confusion_at_threshold(&[0.1], &labels(&[1, 0]), 0.5),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(confusion_at_threshold(&[], &[], 0.5), Err(Error::EmptyInput)));
    }

    #[test]
    fn bac_undefined_without_a_class() {
        let c = ConfusionCounts { tp: 3, fp: 0, tn: 0, fn_: 1 };
        assert!(matches!(c.balanced_accuracy(), Err(Error::UndefinedMetric("specificity"))));
        let perfect = ConfusionCounts { tp: 4, fp: 0, tn: 6, fn_: 0 };
        assert_eq!(perfect.balanced_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        let y = labels(&[0, 0, 1, 1]);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &y).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &labels(&[1, 1])), Err(Error::SingleClass(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let y: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.random_bool(0.3))).collect();
        assert!((roc_auc(&scores, &y).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..=500);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..40) as f64) / 40.0).collect();
            let mut y: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.random_bool(0.4))).collect();
            y[0] = Label::Amf;
            y[1] = Label::Nmf;
            let fast = roc_auc(&scores, &y).unwrap();
            assert!((fast - pairwise_auc(&scores, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_has_nine_points() {
        let grid = ThresholdPolicy::default().grid();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], 0.35);
        assert_eq!(grid[3], 0.5);
        assert_eq!(grid[8], 0.75);
    }

    #[test]
    fn optimizer_examples() {
        let choice = optimize_threshold(
            &[0.40, 0.45, 0.70, 0.72],
            &labels(&[0, 0, 1, 1]),
            &ThresholdPolicy::default(),
        )
        .unwrap();
        assert_eq!(choice.threshold, 0.5);
        assert_eq!(choice.balanced_accuracy, 1.0);

        let flat = optimize_threshold(&[0.6; 4], &labels(&[0, 1, 0, 1]), &ThresholdPolicy::default()).unwrap();
        assert_eq!(flat.threshold, 0.35);

        let degenerate = ThresholdPolicy {
            grid_lo: 0.6,
            grid_hi: 0.6,
            ..Default::default()
        };
        let c = optimize_threshold(&[0.2, 0.9], &labels(&[0, 1]), &degenerate).unwrap();
        assert_eq!(c.threshold, 0.6);
        assert!(optimize_threshold(&[0.2, 0.9], &labels(&[1, 1]), &degenerate).is_err());
    }

    #[test]
    fn report_rows_and_pooling() {
        let probs = [0.9, 0.2, 0.7, 0.4, 0.8, 0.1, 0.65, 0.3];
        let y = labels(&[1, 0, 1, 0, 0, 0, 1, 1]);
        let domains: Vec<String> = ["a", "a", "b", "b", "c", "c", "d", "d"].iter().map(|s| s.to_string()).collect();
        let report = domainwise_report(&probs, &y, &domains, 0.5).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.overall().name, OVERALL);
        // domain c has no positives → sensitivity/AUC/BAC are null
        let c = report.row("c").unwrap();
        assert!(c.sensitivity.is_none() && c.roc_auc.is_none() && c.balanced_accuracy.is_none());
        assert_eq!(c.specificity, Some(0.5));
        let direct = confusion_at_threshold(&probs, &y, 0.5).unwrap();
        assert_eq!(report.overall().sensitivity, Some(direct.sensitivity().unwrap()));
        assert_eq!(report.overall().specificity, Some(direct.specificity().unwrap()));
        let table = report.to_table();
        assert!(table.contains("Balanced Accuracy"));

        let single = domainwise_report(&probs, &y, &vec!["x".into(); 8], 0.5).unwrap();
        assert_eq!(single.rows.len(), 2);
        let (mut a, b) = (single.rows[0].clone(), single.rows[1].clone());
        a.name = b.name.clone();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn sensitivity_and_specificity_monotone_in_threshold(
            probs in prop::collection::vec(0.0f64..=1.0, 2..50),
            t1 in 0.0f64..1.0, dt in 0.0f64..0.5,
        ) {
            let n = probs.len();
            let y: Vec<Label> = (0..n).map(|i| Label::from_bool(i % 2 == 0)).collect();
            let lo = confusion_at_threshold(&probs, &y, t1).unwrap();
            let hi = confusion_at_threshold(&probs, &y, t1 + dt).unwrap();
            prop_assert!(hi.sensitivity().unwrap() <= lo.sensitivity().unwrap());
            prop_assert!(hi.specificity().unwrap() >= lo.specificity().unwrap());
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            probs in prop::collection::vec(0.001f64..0.999, 2..60),
        ) {
            let y: Vec<Label> = (0..probs.len()).map(|i| Label::from_bool(i % 3 == 0)).collect();
            let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln() * 3.0 + 1.0).collect();
            let a = roc_auc(&probs, &y).unwrap();
            let b = roc_auc(&logits, &y).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
