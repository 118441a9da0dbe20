//! Fold ensembles and the predictions file.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::manifest::Label;
use crate::train::{predict_logits, sigmoid};
use crate::zoo::Model;

/// Decimal places of every probability in the predictions file.
pub const PROB_DECIMALS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// arithmetic mean of member probabilities
    #[default]
    MeanProb,
    /// sigmoid of the mean member logit
    MeanLogit,
}

fn check_members(member_probs: &[Vec<f64>]) -> Result<usize> {
    let first = member_probs.first().ok_or(Error::EmptyInput)?;
    for (member, p) in member_probs.iter().enumerate() {
        if p.len() != first.len() {
            return Err(Error::Ragged { member, len: p.len(), expected: first.len() });
        }
    }
    Ok(first.len())
}

/// Element-wise mean over a `k × n` matrix of member probabilities.
pub fn aggregate_probabilities(member_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    aggregate(member_probs, Aggregation::MeanProb)
}

pub fn aggregate(member_probs: &[Vec<f64>], how: Aggregation) -> Result<Vec<f64>> {
    let n = check_members(member_probs)?;
    let k = member_probs.len() as f64;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    Ok((0..n)
        .map(|i| match how {
            Aggregation::MeanProb => member_probs.iter().map(|m| m[i]).sum::<f64>() / k,
            Aggregation::MeanLogit => sigmoid(member_probs.iter().map(|m| logit(m[i])).sum::<f64>() / k),
        })
        .collect())
}

/// AMF iff `prob ≥ τ`.
pub fn predict_with_threshold(probs: &[f64], threshold: f64) -> Vec<Label> {
    probs.iter().map(|&p| Label::from_bool(p >= threshold)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub crop_id: String,
    pub member_probs: Vec<f64>,
    pub prob: f64,
    pub label: Label,
}

pub fn build_records(
    crop_ids: &[String],
    member_probs: &[Vec<f64>],
    how: Aggregation,
    threshold: f64,
) -> Result<Vec<PredictionRecord>> {
    let n = check_members(member_probs)?;
    if n != crop_ids.len() {
        return Err(Error::LengthMismatch { left: crop_ids.len(), right: n });
    }
    let agg = aggregate(member_probs, how)?;
    let labels = predict_with_threshold(&agg, threshold);
    Ok(crop_ids
        .iter()
        .enumerate()
        .map(|(i, id)| PredictionRecord {
            crop_id: id.clone(),
            member_probs: member_probs.iter().map(|m| m[i]).collect(),
            prob: agg[i],
            label: labels[i],
        })
        .collect())
}

fn validate_records(records: &[PredictionRecord]) -> Result<usize> {
    let k = records.first().map_or(0, |r| r.member_probs.len());
    let mut seen = BTreeSet::new();
    for (row, r) in records.iter().enumerate() {
        if r.member_probs.len() != k {
            return Err(Error::Ragged { member: row, len: r.member_probs.len(), expected: k });
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(r.prob) || !r.member_probs.iter().copied().all(in_unit) {
            return Err(Error::MalformedRow { row: row + 1, message: "probability outside [0, 1]".into() });
        }
        if !seen.insert(r.crop_id.as_str()) {
            return Err(Error::MalformedRow { row: row + 1, message: format!("duplicate crop_id {}", r.crop_id) });
        }
    }
    if k == 0 && !records.is_empty() {
        return Err(Error::MalformedRow { row: 1, message: "no member probabilities".into() });
    }
    Ok(k)
}

pub fn header(k: usize) -> Vec<String> {
    let mut h = vec!["crop_id".to_string()];
    h.extend((0..k).map(|j| format!("prob_member_{j}")));
    h.push("prob_ensemble".into());
    h.push("label".into());
    h
}

/// Writes records sorted by crop id with fixed-width probabilities.
pub fn write_predictions<W: Write>(records: &[PredictionRecord], writer: W) -> Result<()> {
    let k = validate_records(records)?;
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(k))?;
    for r in sorted {
        let mut row = vec![r.crop_id.clone()];
        row.extend(r.member_probs.iter().map(|p| format!("{p:.PROB_DECIMALS$}")));
        row.push(format!("{:.PROB_DECIMALS$}", r.prob));
        row.push(r.label.as_u8().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

pub fn export_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_predictions(records, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_prob(field: &str, row: usize) -> Result<f64> {
    let well_formed = field
        .split_once('.')
        .is_some_and(|(int, frac)| matches!(int, "0" | "1") && frac.len() == PROB_DECIMALS && frac.bytes().all(|b| b.is_ascii_digit()));
    let p: f64 = field
        .parse()
        .map_err(|_| Error::MalformedRow { row, message: format!("bad probability {field:?}") })?;
    if !well_formed || !(0.0..=1.0).contains(&p) {
        return Err(Error::MalformedRow { row, message: format!("probability {field:?} is not a 0–1 value with {PROB_DECIMALS} decimals") });
    }
    Ok(p)
}

/// Parses and schema-checks a predictions file: header, column count,
/// probability format, label values, unique sorted crop ids.
pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if head.len() < 4 {
        return Err(Error::Parse(format!("predictions header too short: {head:?}")));
    }
    let k = head.len() - 3;
    if head != header(k) {
        return Err(Error::Parse(format!("unexpected predictions header {head:?}")));
    }
    let mut out: Vec<PredictionRecord> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != k + 3 {
            return Err(Error::MalformedRow { row, message: format!("{} fields, expected {}", rec.len(), k + 3) });
        }
        let crop_id = rec[0].to_string();
        if crop_id.is_empty() {
            return Err(Error::EmptyField { row, column: "crop_id" });
        }
        if out.last().is_some_and(|prev| prev.crop_id >= crop_id) {
            return Err(Error::MalformedRow { row, message: "crop ids not strictly ascending".into() });
        }
        let member_probs = (1..=k).map(|j| parse_prob(&rec[j], row)).collect::<Result<Vec<_>>>()?;
        let prob = parse_prob(&rec[k + 1], row)?;
        let label = match &rec[k + 2] {
            "0" => Label::Nmf,
            "1" => Label::Amf,
            other => return Err(Error::InvalidLabel { row, value: other.to_string() }),
        };
        out.push(PredictionRecord { crop_id, member_probs, prob, label });
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(f)
}

/// Schema check plus the ensemble invariants that survive rounding: the
/// ensemble probability lies within the member range, and labels agree
/// with `threshold` away from the rounding band.
pub fn validate_predictions(records: &[PredictionRecord], threshold: Option<f64>) -> Result<()> {
    validate_records(records)?;
    let half_ulp = 0.5 * 10f64.powi(-(PROB_DECIMALS as i32));
    for (i, r) in records.iter().enumerate() {
        let lo = r.member_probs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.member_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if r.prob < lo - half_ulp || r.prob > hi + half_ulp {
            return Err(Error::MalformedRow { row: i + 2, message: "ensemble probability outside member range".into() });
        }
        if let Some(t) = threshold {
            if (r.prob - t).abs() > half_ulp && r.label != Label::from_bool(r.prob >= t) {
                return Err(Error::MalformedRow { row: i + 2, message: format!("label disagrees with threshold {t}") });
            }
        }
    }
    Ok(())
}

/// Fold models evaluated together.
#[derive(Clone, Debug)]
pub struct FoldEnsemble {
    pub members: Vec<Model>,
    pub aggregation: Aggregation,
    pub threshold: f64,
}

impl FoldEnsemble {
    pub fn new(members: Vec<Model>, aggregation: Aggregation, threshold: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("decision threshold {threshold} must lie in (0, 1)")));
        }
        Ok(Self { members, aggregation, threshold })
    }

    /// `k × n` member probabilities for prepared `C × H × W` tensors.
    pub fn member_probs(&self, tensors: &[Array3<f32>], exec: Exec) -> Result<Vec<Vec<f64>>> {
        self.members
            .iter()
            .map(|m| Ok(predict_logits(m, tensors, exec)?.into_iter().map(sigmoid).collect()))
            .collect()
    }

    pub fn predict(&self, crop_ids: &[String], tensors: &[Array3<f32>], exec: Exec) -> Result<Vec<PredictionRecord>> {
        let probs = self.member_probs(tensors, exec)?;
        build_records(crop_ids, &probs, self.aggregation, self.threshold)
    }
}
