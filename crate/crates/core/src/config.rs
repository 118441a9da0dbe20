//! Run configuration: one TOML file describes a full experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::Aggregation;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::metrics::ThresholdPolicy;
use crate::preprocess::{AugmentationConfig, PreprocessConfig};
use crate::split::SplitStrategy;
use crate::train::TrainConfig;
use crate::vit::FeatureMode;
use crate::zoo::{find_backbone, list_backbones, load_registry, BackboneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub strategy: SplitStrategy,
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { strategy: SplitStrategy::Random, k: 3, seed: 0, stratified: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub aggregation: Aggregation,
    /// Pinned decision threshold; when absent the evaluated optimum is used.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub backbone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    /// Overrides the registry's feature mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_mode: Option<FeatureMode>,
    /// Not echoed: the echo lives inside the output directory.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub threshold: ThresholdPolicy,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    /// Full effective configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    pub fn weights_path(&self) -> Option<PathBuf> {
        self.weights.as_deref().map(|p| self.resolve(p))
    }

    pub fn output_path(&self) -> Result<PathBuf> {
        self.output_dir
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Config("no output directory: set output_dir or pass --out".into()))
    }

    /// Sets both the split and training seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.train.seed = seed;
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        let specs = match &self.registry {
            Some(p) => load_registry(self.resolve(p))?,
            None => list_backbones(),
        };
        let mut spec = find_backbone(&specs, &self.backbone)?;
        if let Some(mode) = self.feature_mode {
            spec.feature_mode = mode;
        }
        Ok(spec)
    }

    /// Composed invariants; `check_paths` also requires inputs to exist.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        self.lora.validate()?;
        self.preprocess.validate()?;
        self.augmentation.validate()?;
        self.train.validate()?;
        self.threshold.validate()?;
        if self.split.k < 2 {
            return Err(Error::Config("split.k must be at least 2".into()));
        }
        if let Some(t) = self.ensemble.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("ensemble.threshold {t} must lie in (0, 1)")));
            }
        }
        let spec = self.backbone_spec()?;
        if self.preprocess.target_size != spec.input_size {
            return Err(Error::Config(format!(
                "preprocess.target_size {} does not match {}'s input size {}",
                self.preprocess.target_size, spec.name, spec.input_size
            )));
        }
        if check_paths {
            let m = self.manifest_path();
            if !m.is_file() {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
            if let Some(w) = self.weights_path() {
                if !w.is_file() {
                    return Err(Error::Config(format!("weights file {} does not exist", w.display())));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
manifest = "data/manifest.csv"
backbone = "tiny-test"
output_dir = "runs/a"

[lora]
rank = 4

[train]
max_epochs = 3

[split]
strategy = "group"
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_toml(MINIMAL, "/work").unwrap();
        assert_eq!(cfg.lora.rank, 4);
        assert_eq!(cfg.lora.alpha, 16.0);
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.split.strategy, SplitStrategy::Group);
        assert_eq!(cfg.split.k, 3);
        assert_eq!(cfg.manifest_path(), PathBuf::from("/work/data/manifest.csv"));
        assert_eq!(cfg.output_path().unwrap(), PathBuf::from("/work/runs/a"));
        cfg.validate(false).unwrap();
    }

    #[test]
    fn echo_round_trips_without_output_dir() {
        let cfg = RunConfig::from_toml(MINIMAL, "/work").unwrap();
        let echo = cfg.to_toml().unwrap();
        assert!(!echo.contains("runs/a"));
        let back = RunConfig::from_toml(&echo, "/work").unwrap();
        assert_eq!(RunConfig { output_dir: cfg.output_dir.clone(), ..back }, cfg);
    }

    #[test]
    fn invalid_compositions_are_rejected() {
        let bad_size = format!("{MINIMAL}\n[preprocess]\ntarget_size = 112\n");
        assert!(RunConfig::from_toml(&bad_size, ".").unwrap().validate(false).is_err());
        let unknown = MINIMAL.replace("tiny-test", "resnet50");
        assert!(RunConfig::from_toml(&unknown, ".").unwrap().validate(false).is_err());
        assert!(RunConfig::from_toml("backbone = 3", ".").is_err());
        let missing = RunConfig::from_toml(MINIMAL, "/nonexistent").unwrap();
        assert!(missing.validate(true).is_err());
    }
}
