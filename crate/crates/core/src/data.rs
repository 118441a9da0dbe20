//! In-memory crop sets: decoded, sized images with their labels and domains.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::Exec;
use crate::manifest::{Label, Manifest};
use crate::preprocess::{apply_strategy, load_image, Image, InputPipeline, Phase, PreprocessConfig};

#[derive(Clone, Debug, Default)]
pub struct CropSet {
    pub crop_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub domains: Vec<String>,
    /// `H × W × C` images already padded or resized to the target size.
    pub images: Vec<Image>,
}

impl CropSet {
    /// Decodes and sizes the manifest records at `indices`.
    pub fn load(m: &Manifest, indices: &[usize], cfg: &PreprocessConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let images = exec
            .map(indices, |&i| {
                let raw = load_image(m.resolve_image(&m.records()[i]))?;
                apply_strategy(&raw, cfg)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let recs = indices.iter().map(|&i| &m.records()[i]);
        Ok(Self {
            crop_ids: recs.clone().map(|r| r.crop_id.clone()).collect(),
            labels: recs.clone().map(|r| r.label).collect(),
            domains: recs.map(|r| r.domain_id.clone()).collect(),
            images,
        })
    }

    /// Every record of `m`, in manifest order.
    pub fn load_all(m: &Manifest, cfg: &PreprocessConfig, exec: Exec) -> Result<Self> {
        let all: Vec<usize> = (0..m.len()).collect();
        Self::load(m, &all, cfg, exec)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            crop_ids: indices.iter().map(|&i| self.crop_ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Normalized `C × H × W` eval-mode tensors.
    pub fn eval_tensors(&self, pipeline: &InputPipeline, exec: Exec) -> Result<Vec<Array3<f32>>> {
        exec.map(&self.images, |img| {
            // eval mode never draws from the rng
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            pipeline.prepare(img, Phase::Eval, &mut rng).map(to_chw_owned)
        })
        .into_iter()
        .collect()
    }
}

pub fn to_chw_owned(img: Image) -> Array3<f32> {
    img.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}
