//! Adapter + head checkpoints. Base weights are never stored; the checkpoint
//! names its backbone and carries a checksum of the base it was trained on.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraLayerState, Target};
use crate::preprocess::{AugmentationConfig, InputPipeline, PreprocessConfig};
use crate::train::{TrainConfig, ValMetrics};
use crate::vit::{BlockAdapters, FeatureMode, VitBackbone};
use crate::zoo::{backbone_checksum, freeze_base, BackboneSpec, ClassifierHead, Model, TrainableState};

pub const CHECKPOINT_FORMAT: &str = "mitopeft-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    /// row-major
    pub data: Vec<f32>,
}

impl Matrix {
    fn from_array(a: &Array2<f32>) -> Self {
        Self { rows: a.nrows(), cols: a.ncols(), data: a.iter().copied().collect() }
    }

    fn to_array(&self) -> Result<Array2<f32>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("matrix {}×{}: {e}", self.rows, self.cols)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub block: usize,
    pub target: Target,
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub weight: Vec<f32>,
    pub bias: f32,
}

/// Where the fold came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRef {
    pub plan_file: String,
    pub plan_sha256: String,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub backbone: String,
    pub base_checksum: String,
    pub feature_mode: FeatureMode,
    pub lora: LoraConfig,
    pub preprocess: PreprocessConfig,
    pub augmentation: AugmentationConfig,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    pub train_config: TrainConfig,
    pub split: Option<SplitRef>,
    pub epoch: usize,
    pub val_metrics: Option<ValMetrics>,
    pub adapters: Vec<AdapterEntry>,
    pub head: HeadEntry,
}

impl Checkpoint {
    /// Captures the trainable part of `model` with `state` as its weights.
    pub fn capture(model: &Model, state: &TrainableState, pipeline: &InputPipeline, train_config: &TrainConfig) -> Self {
        let mut adapters = Vec::new();
        for (block, ad) in state.adapters.iter().enumerate() {
            for t in Target::ALL {
                if let Some(s) = ad.get(t) {
                    adapters.push(AdapterEntry {
                        block,
                        target: t,
                        a: Matrix::from_array(&s.a),
                        b: Matrix::from_array(&s.b),
                    });
                }
            }
        }
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            backbone: model.spec.name.clone(),
            base_checksum: model.base_checksum(),
            feature_mode: model.feature_mode,
            lora: model.lora.clone(),
            preprocess: pipeline.preprocess.clone(),
            augmentation: pipeline.augmentation.clone(),
            norm_mean: pipeline.mean,
            norm_std: pipeline.std,
            train_config: train_config.clone(),
            split: None,
            epoch: 0,
            val_metrics: None,
            adapters,
            head: HeadEntry {
                weight: state.head.weight.to_vec(),
                bias: state.head.bias,
            },
        }
    }

    pub fn pipeline(&self) -> InputPipeline {
        InputPipeline {
            preprocess: self.preprocess.clone(),
            augmentation: self.augmentation.clone(),
            mean: self.norm_mean,
            std: self.norm_std,
        }
    }

    pub fn trainable_state(&self, depth: usize) -> Result<TrainableState> {
        let mut adapters = vec![BlockAdapters::default(); depth];
        let scaling = self.lora.scaling() as f32;
        for e in &self.adapters {
            let slot = adapters
                .get_mut(e.block)
                .ok_or_else(|| Error::Checkpoint(format!("adapter for block {} beyond depth {depth}", e.block)))?;
            if slot.get(e.target).is_some() {
                return Err(Error::Checkpoint(format!("duplicate adapter {}.{}", e.block, e.target.short())));
            }
            let a = e.a.to_array()?;
            let b = e.b.to_array()?;
            if a.nrows() != self.lora.rank || b.ncols() != self.lora.rank {
                return Err(Error::Checkpoint(format!("adapter {}.{} has the wrong rank", e.block, e.target.short())));
            }
            slot.set(
                e.target,
                Some(LoraLayerState { a, b, scaling, dropout: self.lora.dropout, merged: false }),
            );
        }
        Ok(TrainableState {
            adapters,
            head: ClassifierHead { weight: Array1::from(self.head.weight.clone()), bias: self.head.bias },
        })
    }

    /// Rebuilds the model on `backbone`, which must be the base the
    /// checkpoint was trained against.
    pub fn into_model(&self, spec: &BackboneSpec, backbone: Arc<VitBackbone>) -> Result<Model> {
        if spec.name != self.backbone {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {}, not {}",
                self.backbone, spec.name
            )));
        }
        let checksum = backbone_checksum(&backbone);
        if checksum != self.base_checksum {
            return Err(Error::Checkpoint(format!(
                "base weights differ from training (checksum {} vs {})",
                &checksum[..12],
                &self.base_checksum[..12.min(self.base_checksum.len())]
            )));
        }
        let mut spec = spec.clone();
        spec.feature_mode = self.feature_mode;
        let state = self.trainable_state(backbone.cfg.depth)?;
        let model = Model::from_parts(spec, self.lora.clone(), backbone, state)?;
        Ok(freeze_base(model))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_model, find_backbone, list_backbones};

    fn pipeline(spec: &BackboneSpec) -> InputPipeline {
        InputPipeline {
            preprocess: PreprocessConfig::default(),
            augmentation: AugmentationConfig::default(),
            mean: spec.norm_mean,
            std: spec.norm_std,
        }
    }

    #[test]
    fn json_round_trip_restores_weights_exactly() {
        let spec = find_backbone(&list_backbones(), "tiny-test").unwrap();
        let model = build_model(&spec, &LoraConfig::with_rank(4), None, 9).unwrap();
        let mut state = model.trainable().clone();
        let mut flat = state.flatten();
        flat.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() / 3.0);
        state.assign_flat(&flat).unwrap();

        let ck = Checkpoint::capture(&model, &state, &pipeline(&spec), &TrainConfig::default());
        assert!(!ck.to_json().unwrap().contains("patch_embed"));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.into_model(&spec, model.backbone().clone()).unwrap();
        assert_eq!(rebuilt.trainable().flatten(), flat);
        assert!(rebuilt.is_base_frozen());
    }

    #[test]
    fn wrong_base_is_rejected() {
        let spec = find_backbone(&list_backbones(), "tiny-test").unwrap();
        let model = build_model(&spec, &LoraConfig::default(), None, 0).unwrap();
        let ck = Checkpoint::capture(&model, model.trainable(), &pipeline(&spec), &TrainConfig::default());
        let mut other = (**model.backbone()).clone();
        other.norm.beta[0] += 1.0;
        assert!(matches!(ck.into_model(&spec, Arc::new(other)), Err(Error::Checkpoint(_))));
        let mut bad = ck.clone();
        bad.version = 99;
        assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());
    }
}
