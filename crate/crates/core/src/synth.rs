//! Synthetic crop datasets for smoke tests and demos. Classes differ in
//! color (AMF crops are darker and more violet), domains add a stain tint.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{write_manifest, CropRecord, Label, Manifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_crops: usize,
    pub n_images: usize,
    pub n_domains: usize,
    pub amf_fraction: f64,
    pub crop_size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_crops: 200, n_images: 40, n_domains: 4, amf_fraction: 0.25, crop_size: 64, seed: 0 }
    }
}

const NMF_COLOR: [f32; 3] = [206.0, 160.0, 198.0];
const AMF_COLOR: [f32; 3] = [172.0, 118.0, 184.0];

fn render(label: Label, tint: [f32; 3], size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = if label.is_positive() { AMF_COLOR } else { NMF_COLOR };
    let noise = Normal::new(0.0f32, 16.0).unwrap();
    let cx = rng.random_range(0.3..0.7) * size as f32;
    let cy = rng.random_range(0.3..0.7) * size as f32;
    let radius = rng.random_range(0.12..0.25) * size as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let dist = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
        let nucleus = if dist < radius { 0.75 } else { 1.0 };
        let px: Vec<u8> = (0..3)
            .map(|c| (base[c] * nucleus + tint[c] + noise.sample(rng)).clamp(0.0, 255.0) as u8)
            .collect();
        Rgb([px[0], px[1], px[2]])
    })
}

/// Writes `images/*.png` and `manifest.csv` under `dir` and returns the
/// loaded manifest.
pub fn generate(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Manifest> {
    let dir = dir.as_ref();
    if cfg.n_images == 0 || cfg.n_domains == 0 || cfg.n_images < cfg.n_domains || cfg.n_crops < cfg.n_images {
        return Err(Error::Config("need n_crops ≥ n_images ≥ n_domains > 0".into()));
    }
    if !(0.0..=1.0).contains(&cfg.amf_fraction) {
        return Err(Error::Config("amf_fraction must lie in [0, 1]".into()));
    }
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let tints: Vec<[f32; 3]> = (0..cfg.n_domains)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-18.0f32..18.0)))
        .collect();
    let n_amf = (cfg.n_crops as f64 * cfg.amf_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..cfg.n_crops).map(|i| Label::from_bool(i < n_amf)).collect();
    labels.shuffle(&mut rng);

    let mut records = Vec::with_capacity(cfg.n_crops);
    for (i, &label) in labels.iter().enumerate() {
        let image = i % cfg.n_images;
        let domain = image % cfg.n_domains;
        let crop_id = format!("crop_{i:04}");
        let rel = PathBuf::from("images").join(format!("{crop_id}.png"));
        let pic = render(label, tints[domain], cfg.crop_size, &mut rng);
        let path = dir.join(&rel);
        pic.save(&path)?;
        records.push(CropRecord {
            crop_id,
            image_ref: rel,
            source_image_id: format!("img_{image:03}"),
            label,
            domain_id: format!("D{domain}"),
            dataset_source: "synthetic".into(),
        });
    }
    let manifest = Manifest::new(records)?.with_root(dir);
    write_manifest(&manifest, dir.join("manifest.csv"))?;
    Ok(manifest)
}
