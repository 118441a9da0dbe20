//! K-fold cross-validation plans at source-image granularity.
//!
//! Crops cut from one labeled image always share a fold. Under the group
//! strategy every image of a domain shares a fold too, so validation folds
//! measure cross-domain generalization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Manifest;

pub const PLAN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    Random,
    Group,
}

impl std::fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitStrategy::Random => "random",
            SplitStrategy::Group => "group",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub k: usize,
    pub seed: u64,
    /// Label-stratified dealing for random plans; off by default.
    pub stratified: bool,
    pub assignment: BTreeMap<String, usize>,
    pub domain_of: BTreeMap<String, String>,
}

/// Train/validation crop indices (into the manifest) for one held-out fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl SplitPlan {
    pub fn fold_of(&self, source_image_id: &str) -> Option<usize> {
        self.assignment.get(source_image_id).copied()
    }

    /// Number of images per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            if f < self.k {
                sizes[f] += 1;
            }
        }
        sizes
    }

    pub fn fold_domains(&self) -> Vec<BTreeSet<String>> {
        let mut out = vec![BTreeSet::new(); self.k];
        for (image, &f) in &self.assignment {
            if let (Some(set), Some(d)) = (out.get_mut(f), self.domain_of.get(image)) {
                set.insert(d.clone());
            }
        }
        out
    }

    /// Fold of every crop, in manifest order.
    pub fn crop_folds(&self, m: &Manifest) -> Result<Vec<usize>> {
        m.records()
            .iter()
            .map(|r| {
                self.fold_of(&r.source_image_id).ok_or_else(|| {
                    Error::PlanMismatch(format!("image {:?} has no fold", r.source_image_id))
                })
            })
            .collect()
    }

    /// The k (train, validation) pairs; validation fold j is held out from
    /// training on folds ≠ j.
    pub fn fold_splits(&self, m: &Manifest) -> Result<Vec<FoldSplit>> {
        let folds = self.crop_folds(m)?;
        Ok((0..self.k)
            .map(|j| {
                let (val, train): (Vec<usize>, Vec<usize>) =
                    (0..folds.len()).partition(|&i| folds[i] == j);
                FoldSplit { fold: j, train, val }
            })
            .collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        let file = PlanFile {
            version: PLAN_VERSION,
            strategy: self.strategy,
            k: self.k,
            seed: self.seed,
            stratified: self.stratified,
            images: self
                .assignment
                .iter()
                .map(|(id, &fold)| PlanRow {
                    source_image_id: id.clone(),
                    domain_id: self.domain_of.get(id).cloned().unwrap_or_default(),
                    fold,
                })
                .collect(),
        };
        toml::to_string(&file).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PlanFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.version != PLAN_VERSION {
            return Err(Error::Parse(format!(
                "unsupported split plan version {}",
                file.version
            )));
        }
        let mut assignment = BTreeMap::new();
        let mut domain_of = BTreeMap::new();
        for row in file.images {
            if row.fold >= file.k {
                return Err(Error::Parse(format!(
                    "image {:?} assigned to fold {} but k = {}",
                    row.source_image_id, row.fold, file.k
                )));
            }
            domain_of.insert(row.source_image_id.clone(), row.domain_id);
            if assignment.insert(row.source_image_id.clone(), row.fold).is_some() {
                return Err(Error::Parse(format!(
                    "image {:?} listed twice",
                    row.source_image_id
                )));
            }
        }
        Ok(Self {
            strategy: file.strategy,
            k: file.k,
            seed: file.seed,
            stratified: file.stratified,
            assignment,
            domain_of,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    version: u32,
    strategy: SplitStrategy,
    k: usize,
    seed: u64,
    #[serde(default)]
    stratified: bool,
    images: Vec<PlanRow>,
}

#[derive(Serialize, Deserialize)]
struct PlanRow {
    source_image_id: String,
    domain_id: String,
    fold: usize,
}

pub fn random_kfold(m: &Manifest, k: usize, seed: u64) -> Result<SplitPlan> {
    kfold_random(m, k, seed, false)
}

/// Random plan whose images are dealt separately per label (an image counts
/// as positive if it holds any AMF crop).
pub fn stratified_random_kfold(m: &Manifest, k: usize, seed: u64) -> Result<SplitPlan> {
    kfold_random(m, k, seed, true)
}

fn kfold_random(m: &Manifest, k: usize, seed: u64, stratified: bool) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let domain_of = m.image_domains()?;
    let images = m.source_images();
    if images.len() < k {
        return Err(Error::TooFewImages {
            have: images.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<&str> = if stratified {
        let positive: BTreeSet<&str> = m
            .records()
            .iter()
            .filter(|r| r.label.is_positive())
            .map(|r| r.source_image_id.as_str())
            .collect();
        let (mut pos, mut neg): (Vec<&str>, Vec<&str>) =
            images.iter().partition(|i| positive.contains(*i));
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.into_iter().chain(neg).collect()
    } else {
        let mut all = images;
        all.shuffle(&mut rng);
        all
    };
    let assignment = order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(SplitPlan {
        strategy: SplitStrategy::Random,
        k,
        seed,
        stratified,
        assignment,
        domain_of,
    })
}

/// Domain-held-out plan. Domains are placed largest-first (by image count)
/// into the fold with the fewest images so far; ties between equally large
/// domains are broken by a seeded shuffle, ties between folds by lowest index.
pub fn group_kfold(m: &Manifest, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let domain_of = m.image_domains()?;
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for d in domain_of.values() {
        *sizes.entry(d.as_str()).or_default() += 1;
    }
    if sizes.len() < k {
        return Err(Error::TooFewDomains {
            have: sizes.len(),
            k,
        });
    }
    let mut domains: Vec<(&str, usize)> = sizes.into_iter().collect();
    domains.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    domains.sort_by(|a, b| b.1.cmp(&a.1));

    let mut load = vec![0usize; k];
    let mut fold_of_domain: BTreeMap<&str, usize> = BTreeMap::new();
    for (domain, n) in domains {
        let target = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
        load[target] += n;
        fold_of_domain.insert(domain, target);
    }
    let assignment = domain_of
        .iter()
        .map(|(img, d)| (img.clone(), fold_of_domain[d.as_str()]))
        .collect();
    Ok(SplitPlan {
        strategy: SplitStrategy::Group,
        k,
        seed,
        stratified: false,
        assignment,
        domain_of,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LeakageAudit {
    /// Source images whose crops land in more than one fold.
    pub image_violations: Vec<String>,
    /// Domains spread over more than one fold (group plans only).
    pub domain_violations: Vec<String>,
}

impl LeakageAudit {
    pub fn is_clean(&self) -> bool {
        self.image_violations.is_empty() && self.domain_violations.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.image_violations.len() + self.domain_violations.len()
    }
}

/// Checks that `plan` covers exactly the manifest's images, with matching
/// domains and in-range folds, and audits the resulting crop assignment.
pub fn verify_no_leakage(plan: &SplitPlan, m: &Manifest) -> Result<LeakageAudit> {
    let domains = m.image_domains()?;
    if let Some(missing) = domains.keys().find(|i| !plan.assignment.contains_key(*i)) {
        return Err(Error::PlanMismatch(format!("image {missing:?} is not covered")));
    }
    if let Some(extra) = plan.assignment.keys().find(|i| !domains.contains_key(*i)) {
        return Err(Error::PlanMismatch(format!("image {extra:?} is not in the manifest")));
    }
    if let Some((img, f)) = plan.assignment.iter().find(|(_, f)| **f >= plan.k) {
        return Err(Error::PlanMismatch(format!(
            "image {img:?} has fold {f} outside [0, {})",
            plan.k
        )));
    }
    for (img, d) in &domains {
        if plan.domain_of.get(img) != Some(d) {
            return Err(Error::PlanMismatch(format!(
                "plan records a different domain for image {img:?}"
            )));
        }
    }
    let folds = plan.crop_folds(m)?;
    Ok(audit_crop_assignment(m, &folds, plan.strategy))
}

/// Crop-level audit of an explicit fold assignment (one fold per manifest
/// record).
pub fn audit_crop_assignment(
    m: &Manifest,
    crop_folds: &[usize],
    strategy: SplitStrategy,
) -> LeakageAudit {
    let mut image_folds: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    let mut domain_folds: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for (r, &f) in m.records().iter().zip(crop_folds) {
        image_folds.entry(&r.source_image_id).or_default().insert(f);
        domain_folds.entry(&r.domain_id).or_default().insert(f);
    }
    let spanning = |map: BTreeMap<&str, BTreeSet<usize>>| -> Vec<String> {
        map.into_iter()
            .filter(|(_, folds)| folds.len() > 1)
            .map(|(k, _)| k.to_string())
            .collect()
    };
    LeakageAudit {
        image_violations: spanning(image_folds),
        domain_violations: match strategy {
            SplitStrategy::Group => spanning(domain_folds),
            SplitStrategy::Random => Vec::new(),
        },
    }
}
