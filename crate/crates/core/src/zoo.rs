//! Backbone registry, binary classifier head and LoRA model assembly.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, ArrayView3, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::{init_adapter, LayerDims, LoraConfig, LoraGrads, ModelDescription, Target};
use crate::manifest::Label;
use crate::vit::{BlockAdapterGrads, BlockAdapters, FeatureMode, MlpKind, VitBackbone, VitConfig};
use crate::weights;

/// Environment variable naming a directory of `<backbone>.safetensors` files.
pub const WEIGHTS_DIR_ENV: &str = "MITOPEFT_WEIGHTS_DIR";

const BUILTIN_REGISTRY: &str = include_str!("../assets/backbones.toml");
const REGISTRY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    PretrainedExternal,
    RandomTiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub architecture: String,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub mlp: MlpKind,
    pub mlp_hidden: usize,
    pub layer_scale: bool,
    pub reg_tokens: usize,
    pub pos_embed_prefix: bool,
    pub input_size: usize,
    pub feature_mode: FeatureMode,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    pub weights_source: WeightsSource,
    #[serde(default)]
    pub gated_source: Option<String>,
    #[serde(default)]
    pub init_seed: Option<u64>,
}

impl BackboneSpec {
    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            image_size: self.input_size,
            patch_size: self.patch_size,
            in_chans: 3,
            embed_dim: self.embed_dim,
            depth: self.depth,
            num_heads: self.num_heads,
            mlp_hidden: self.mlp_hidden,
            mlp: self.mlp,
            layer_scale: self.layer_scale,
            reg_tokens: self.reg_tokens,
            pos_embed_prefix: self.pos_embed_prefix,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 {
            return Err(Error::Config(format!("{}: embed_dim and depth must be positive", self.name)));
        }
        if self.weights_source == WeightsSource::PretrainedExternal && self.input_size != 224 {
            return Err(Error::Config(format!("{}: pretrained backbones take 224×224 inputs", self.name)));
        }
        self.vit_config().validate()
    }

    /// Base parameter count implied by the architecture, without allocating.
    pub fn base_param_count(&self) -> usize {
        let c = self.vit_config();
        let d = c.embed_dim;
        let gated = match c.mlp {
            MlpKind::Gelu => c.mlp_hidden,
            MlpKind::SwiGlu => c.mlp_hidden / 2,
        };
        let block = 2 * 2 * d                       // norms
            + 4 * (d * d + d)                       // q, k, v, proj
            + (c.mlp_hidden * d + c.mlp_hidden)     // fc1
            + (gated * d + d)                       // fc2
            + if c.layer_scale { 2 * d } else { 0 };
        (c.patch_dim() * d + d) + d + c.reg_tokens * d + c.pos_len() * d + c.depth * block + 2 * d
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    schema_version: u32,
    backbone: Vec<BackboneSpec>,
}

pub fn parse_registry(text: &str) -> Result<Vec<BackboneSpec>> {
    let file: RegistryFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if file.schema_version != REGISTRY_VERSION {
        return Err(Error::Parse(format!(
            "unsupported registry schema_version {}",
            file.schema_version
        )));
    }
    for spec in &file.backbone {
        spec.validate()?;
    }
    Ok(file.backbone)
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<Vec<BackboneSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_registry(&text)
}

/// The built-in registry: virchow, virchow2, uni and tiny-test.
pub fn list_backbones() -> Vec<BackboneSpec> {
    parse_registry(BUILTIN_REGISTRY).expect("built-in registry is valid")
}

pub fn find_backbone(specs: &[BackboneSpec], name: &str) -> Result<BackboneSpec> {
    specs
        .iter()
        .find(|s| s.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownBackbone(name.to_string()))
}

/// Single-logit linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array1<f32>,
    pub bias: f32,
}

impl ClassifierHead {
    /// `U(-1/√in, 1/√in)` weights and bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Self {
            weight: Array1::from_shape_simple_fn(in_dim, || rng.random_range(-bound..=bound)),
            bias: rng.random_range(-bound..=bound),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.len()
    }

    pub fn out_dim(&self) -> usize {
        1
    }

    pub fn logit(&self, feature: &Array1<f32>) -> f32 {
        self.weight.dot(feature) + self.bias
    }
}

/// Everything that trains: adapters and head.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableState {
    pub adapters: Vec<BlockAdapters>,
    pub head: ClassifierHead,
}

impl TrainableState {
    /// Flat parameter vector; order is block → q,k,v → A then B (row-major),
    /// then head weight and bias.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        for ad in &self.adapters {
            for t in Target::ALL {
                if let Some(s) = ad.get(t) {
                    out.extend(s.a.iter());
                    out.extend(s.b.iter());
                }
            }
        }
        out.extend(self.head.weight.iter());
        out.push(self.head.bias);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                left: flat.len(),
                right: self.num_params(),
            });
        }
        let mut it = flat.iter().copied();
        for ad in &mut self.adapters {
            for t in Target::ALL {
                if let Some(s) = ad.get_mut(t) {
                    s.a.iter_mut().for_each(|v| *v = it.next().unwrap());
                    s.b.iter_mut().for_each(|v| *v = it.next().unwrap());
                }
            }
        }
        self.head.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
        self.head.bias = it.next().unwrap();
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let adapters: usize = self
            .adapters
            .iter()
            .flat_map(|ad| Target::ALL.into_iter().filter_map(|t| ad.get(t)))
            .map(|s| s.num_params())
            .sum();
        adapters + self.head.in_dim() + 1
    }
}

/// Gradients shaped like [`TrainableState`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableGrads {
    pub adapters: Vec<BlockAdapterGrads>,
    pub head_weight: Array1<f32>,
    pub head_bias: f32,
}

impl TrainableGrads {
    /// Same order as [`TrainableState::flatten`].
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for g in &self.adapters {
            for t in Target::ALL {
                if let Some(LoraGrads { a, b }) = g.get(t) {
                    out.extend(a.iter());
                    out.extend(b.iter());
                }
            }
        }
        out.extend(self.head_weight.iter());
        out.push(self.head_bias);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradient {
    pub logit: f32,
    pub loss: f64,
    pub grads: TrainableGrads,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamInfo {
    pub name: String,
    pub numel: usize,
    pub trainable: bool,
}

/// Frozen backbone plus LoRA adapters plus classifier head.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: BackboneSpec,
    pub lora: LoraConfig,
    pub feature_mode: FeatureMode,
    backbone: Arc<VitBackbone>,
    state: TrainableState,
    base_frozen: bool,
}

impl Model {
    /// Assembles a model from parts; the base stays trainable until
    /// [`freeze_base`] is applied. `build_model` does both.
    pub fn from_parts(
        spec: BackboneSpec,
        lora: LoraConfig,
        backbone: Arc<VitBackbone>,
        state: TrainableState,
    ) -> Result<Self> {
        if state.adapters.len() != backbone.blocks.len() {
            return Err(Error::Shape("one adapter slot per block is required".into()));
        }
        let feature_mode = spec.feature_mode;
        if state.head.in_dim() != feature_mode.feature_dim(backbone.cfg.embed_dim) {
            return Err(Error::Shape(format!(
                "head expects {} features, backbone yields {}",
                state.head.in_dim(),
                feature_mode.feature_dim(backbone.cfg.embed_dim)
            )));
        }
        Ok(Self {
            spec,
            lora,
            feature_mode,
            backbone,
            state,
            base_frozen: false,
        })
    }

    pub fn backbone(&self) -> &Arc<VitBackbone> {
        &self.backbone
    }

    pub fn trainable(&self) -> &TrainableState {
        &self.state
    }

    pub fn set_trainable(&mut self, state: TrainableState) -> Result<()> {
        if state.num_params() != self.state.num_params() || state.adapters.len() != self.state.adapters.len() {
            return Err(Error::Shape("trainable state does not fit this model".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn input_size(&self) -> usize {
        self.backbone.cfg.image_size
    }

    /// Raw logit of one `C × H × W` input in eval mode.
    pub fn logit(&self, img: ArrayView3<f32>) -> Result<f32> {
        let (feature, _) =
            self.backbone
                .forward_features(img, &self.state.adapters, self.feature_mode, None, false)?;
        Ok(self.state.head.logit(&feature))
    }

    /// Eval-mode logits for an `N × C × H × W` batch.
    pub fn forward_logits(&self, batch: ArrayView4<f32>, exec: Exec) -> Result<Array1<f32>> {
        let (_, c, h, w) = batch.dim();
        let s = self.input_size();
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape(format!("batch items are {c}×{h}×{w}, model expects 3×{s}×{s}")));
        }
        let items: Vec<ArrayView3<f32>> = batch.axis_iter(Axis(0)).collect();
        let logits = exec.map(&items, |img| self.logit(img.view()));
        logits.into_iter().collect::<Result<Vec<_>>>().map(Array1::from)
    }

    /// Train-mode forward and backward for one sample under BCE-with-logits.
    pub fn forward_backward(
        &self,
        img: ArrayView3<f32>,
        label: Label,
        rng: &mut dyn rand::RngCore,
    ) -> Result<SampleGradient> {
        let (feature, cache) = self.backbone.forward_features(
            img,
            &self.state.adapters,
            self.feature_mode,
            Some(rng),
            true,
        )?;
        let cache = cache.expect("recorded");
        let z = self.state.head.logit(&feature);
        let y = if label.is_positive() { 1.0 } else { 0.0 };
        let loss = crate::train::bce_with_logits(z as f64, y);
        let dz = (crate::train::sigmoid(z as f64) - y) as f32;
        let d_feature = &self.state.head.weight * dz;
        let adapters = self
            .backbone
            .backward(&d_feature, &self.state.adapters, self.feature_mode, &cache);
        Ok(SampleGradient {
            logit: z,
            loss,
            grads: TrainableGrads {
                adapters,
                head_weight: feature * dz,
                head_bias: dz,
            },
        })
    }

    pub fn parameters(&self) -> Vec<ParamInfo> {
        let base = !self.base_frozen;
        let b = &self.backbone;
        let mut out = vec![
            ParamInfo { name: "patch_embed".into(), numel: b.patch_embed.num_params(), trainable: base },
            ParamInfo { name: "cls_token".into(), numel: b.cls_token.len(), trainable: base },
            ParamInfo { name: "reg_token".into(), numel: b.reg_tokens.len(), trainable: base },
            ParamInfo { name: "pos_embed".into(), numel: b.pos_embed.len(), trainable: base },
        ];
        for (i, (blk, ad)) in b.blocks.iter().zip(&self.state.adapters).enumerate() {
            out.push(ParamInfo { name: format!("blocks.{i}"), numel: blk.num_params(), trainable: base });
            for t in Target::ALL {
                if let Some(s) = ad.get(t) {
                    out.push(ParamInfo {
                        name: format!("blocks.{i}.attn.{}.lora", t.short()),
                        numel: s.num_params(),
                        trainable: true,
                    });
                }
            }
        }
        out.push(ParamInfo { name: "norm".into(), numel: b.norm.num_params(), trainable: base });
        out.push(ParamInfo { name: "head".into(), numel: self.state.head.in_dim() + 1, trainable: true });
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.parameters().iter().filter(|p| p.trainable).map(|p| p.numel).sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel).sum()
    }

    pub fn description(&self) -> ModelDescription {
        let mut adapted_layers = Vec::new();
        for ad in &self.state.adapters {
            for t in Target::ALL {
                if let Some(s) = ad.get(t) {
                    adapted_layers.push(LayerDims { d_in: s.d_in(), d_out: s.d_out() });
                }
            }
        }
        ModelDescription {
            adapted_layers,
            head_in: self.state.head.in_dim(),
        }
    }

    /// SHA-256 over every frozen base tensor.
    pub fn base_checksum(&self) -> String {
        backbone_checksum(&self.backbone)
    }
}

pub fn backbone_checksum(b: &VitBackbone) -> String {
    let mut h = Sha256::new();
    for (name, _, data) in weights::named_tensors(b) {
        h.update(name.as_bytes());
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Marks every base weight non-trainable; only adapters and head remain.
pub fn freeze_base(mut model: Model) -> Model {
    model.base_frozen = true;
    model
}

/// Instantiates base weights for `spec`: seeded random for the tiny test
/// backbone, otherwise read from `weights` or `$MITOPEFT_WEIGHTS_DIR`.
pub fn load_base(spec: &BackboneSpec, weights: Option<&Path>) -> Result<VitBackbone> {
    match spec.weights_source {
        WeightsSource::RandomTiny => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed.unwrap_or(0));
            VitBackbone::random(spec.vit_config(), &mut rng)
        }
        WeightsSource::PretrainedExternal => {
            let path = match weights {
                Some(p) => p.to_path_buf(),
                None => std::env::var_os(WEIGHTS_DIR_ENV)
                    .map(|dir| PathBuf::from(dir).join(format!("{}.safetensors", spec.name)))
                    .filter(|p| p.exists())
                    .ok_or_else(|| Error::GatedWeights {
                        backbone: spec.name.clone(),
                        source_hint: spec.gated_source.clone().unwrap_or_else(|| "its model hub".into()),
                        env_var: WEIGHTS_DIR_ENV,
                    })?,
            };
            weights::load_backbone(&path, spec)
        }
    }
}

/// Fresh adapters (`B = 0`) on the configured blocks and projections.
pub fn init_adapters(backbone: &VitBackbone, lora: &LoraConfig, rng: &mut ChaCha8Rng) -> Vec<BlockAdapters> {
    let d = backbone.cfg.embed_dim;
    (0..backbone.cfg.depth)
        .map(|i| {
            let mut ad = BlockAdapters::default();
            if lora.adapts_block(i) {
                for &t in &lora.targets {
                    ad.set(t, Some(init_adapter(d, d, lora, rng)));
                }
            }
            ad
        })
        .collect()
}

/// Frozen backbone with injected adapters and a fresh head.
pub fn build_model(
    spec: &BackboneSpec,
    lora: &LoraConfig,
    weights: Option<&Path>,
    seed: u64,
) -> Result<Model> {
    let backbone = Arc::new(load_base(spec, weights)?);
    build_on(spec, lora, backbone, seed)
}

/// Like [`build_model`] but sharing an already-loaded base.
pub fn build_on(spec: &BackboneSpec, lora: &LoraConfig, backbone: Arc<VitBackbone>, seed: u64) -> Result<Model> {
    lora.validate()?;
    if let Some(bad) = lora.blocks.iter().flatten().find(|&&b| b >= backbone.cfg.depth) {
        return Err(Error::Config(format!("block {bad} out of range for depth {}", backbone.cfg.depth)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapters = init_adapters(&backbone, lora, &mut rng);
    let head = ClassifierHead::init(spec.feature_mode.feature_dim(backbone.cfg.embed_dim), &mut rng);
    let model = Model::from_parts(spec.clone(), lora.clone(), backbone, TrainableState { adapters, head })?;
    Ok(freeze_base(model))
}

/// CHW view of an `H × W × C` image.
pub fn to_chw(img: &crate::preprocess::Image) -> ArrayView3<'_, f32> {
    img.view().permuted_axes([2, 0, 1])
}

pub fn sigmoid_probs(logits: &Array1<f32>) -> Vec<f64> {
    logits.iter().map(|&z| crate::train::sigmoid(z as f64)).collect()
}
