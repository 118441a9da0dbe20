//! Crop images to fixed-size model inputs.
//!
//! Images are `H×W×C` float arrays with values in `[0, 1]` before
//! normalization. Two strategies bring a crop to the backbone's input size:
//! centered padding (no resampling) and bilinear resizing.

use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Image = Array3<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Pad,
    Resize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub strategy: Strategy,
    pub target_size: usize,
    pub pad_fill: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Pad,
            target_size: 224,
            // near-white, like H&E background
            pad_fill: [1.0; 3],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        if self.pad_fill.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("pad_fill values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub jitter_strength: f64,
    pub crop_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            jitter_strength: 0.2,
            crop_scale_range: (0.8, 1.0),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// A configuration under which [`augment`] is the identity.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            jitter_strength: 0.0,
            crop_scale_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config("jitter_strength must lie in [0, 1]".into()));
        }
        if self.max_rotation_deg < 0.0 || !self.max_rotation_deg.is_finite() {
            return Err(Error::Config("max_rotation_deg must be finite and >= 0".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("crop_scale_range must satisfy 0 < lo <= hi <= 1".into()));
        }
        Ok(())
    }
}

/// Decodes an 8-bit RGB image (PNG/TIFF/JPEG) into `[0, 1]` floats.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let rgb = image::open(path.as_ref())?.to_rgb8();
    Ok(rgb_to_image(&rgb))
}

pub fn rgb_to_image(rgb: &image::RgbImage) -> Image {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

pub fn image_to_rgb(img: &Image) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn pad_to_target(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    let (h, w, c) = img.dim();
    let t = cfg.target_size;
    if h == 0 || w == 0 {
        return Err(Error::EmptyImage);
    }
    if h > t || w > t {
        return Err(Error::OversizedInput {
            height: h,
            width: w,
            target: t,
        });
    }
    let mut out = Array3::from_shape_fn((t, t, c), |(_, _, ch)| cfg.pad_fill[ch.min(2)]);
    let top = (t - h) / 2;
    let left = (t - w) / 2;
    out.slice_mut(ndarray::s![top..top + h, left..left + w, ..])
        .assign(img);
    Ok(out)
}

pub fn resize_to_target(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    resize_bilinear(img.view(), cfg.target_size, cfg.target_size)
}

/// Half-pixel-centre bilinear resampling with edge clamping.
pub fn resize_bilinear(img: ArrayView3<f32>, out_h: usize, out_w: usize) -> Result<Image> {
    let (h, w, c) = img.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::EmptyImage);
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.to_owned());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

pub fn apply_strategy(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    match cfg.strategy {
        Strategy::Pad => pad_to_target(img, cfg),
        Strategy::Resize => resize_to_target(img, cfg),
    }
}

/// Random resized crop, horizontal flip, rotation and color jitter, in that
/// order. Output has the input's shape. Each stage is skipped entirely when
/// its parameter disables it, so the all-off configuration is the identity.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let (h, w, _) = img.dim();
    let mut out = img.clone();

    let (lo, hi) = cfg.crop_scale_range;
    if lo < 1.0 {
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let side = scale.sqrt();
        let ch = ((h as f64 * side).round() as usize).clamp(1, h);
        let cw = ((w as f64 * side).round() as usize).clamp(1, w);
        if (ch, cw) != (h, w) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            let crop = out.slice(ndarray::s![top..top + ch, left..left + cw, ..]);
            out = resize_bilinear(crop, h, w).expect("non-empty crop");
        }
    }

    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        out.invert_axis(Axis(1));
        out = out.as_standard_layout().to_owned();
    }

    if cfg.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        if deg != 0.0 {
            out = rotate(&out, deg.to_radians());
        }
    }

    if cfg.jitter_strength > 0.0 {
        let j = cfg.jitter_strength;
        let brightness = rng.random_range(1.0 - j..=1.0 + j) as f32;
        let contrast = rng.random_range(1.0 - j..=1.0 + j) as f32;
        let saturation = rng.random_range(1.0 - j..=1.0 + j) as f32;
        color_jitter(&mut out, brightness, contrast, saturation);
    }
    out
}

/// Rotation about the image centre, bilinear sampling, edge-clamped.
fn rotate(img: &Image, radians: f64) -> Image {
    let (h, w, c) = img.dim();
    let (sin, cos) = radians.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse map: rotate the destination coordinate back
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn color_jitter(img: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    img.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));

    let gray_of = |px: ndarray::ArrayView1<f32>| -> f32 {
        if px.len() >= 3 {
            0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
        } else {
            px.mean().unwrap_or(0.0)
        }
    };
    let (h, w, _) = img.dim();
    let mean_gray = img
        .lanes(Axis(2))
        .into_iter()
        .map(gray_of)
        .sum::<f32>()
        / (h * w) as f32;
    img.mapv_inplace(|v| (mean_gray + contrast * (v - mean_gray)).clamp(0.0, 1.0));

    for mut px in img.lanes_mut(Axis(2)) {
        let g = gray_of(px.view());
        px.mapv_inplace(|v| (g + saturation * (v - g)).clamp(0.0, 1.0));
    }
}

pub fn normalize(img: &Image, mean: &[f32], std: &[f32]) -> Result<Image> {
    check_stats(img, mean, std)?;
    let mut out = img.clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (mean[ch], std[ch]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(img: &Image, mean: &[f32], std: &[f32]) -> Result<Image> {
    check_stats(img, mean, std)?;
    let mut out = img.clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (mean[ch], std[ch]);
        plane.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}

fn check_stats(img: &Image, mean: &[f32], std: &[f32]) -> Result<()> {
    let c = img.dim().2;
    if mean.len() != c || std.len() != c {
        return Err(Error::Shape(format!(
            "{c} channels but {} means / {} stds",
            mean.len(),
            std.len()
        )));
    }
    if let Some(ch) = std.iter().position(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(Error::ZeroStd(ch));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Full crop → model-input path. Augmentation runs only in [`Phase::Train`];
/// evaluation applies the sizing strategy and normalization only.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPipeline {
    pub preprocess: PreprocessConfig,
    pub augmentation: AugmentationConfig,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl InputPipeline {
    pub fn prepare<R: Rng + ?Sized>(&self, raw: &Image, phase: Phase, rng: &mut R) -> Result<Image> {
        let sized = apply_strategy(raw, &self.preprocess)?;
        let sized = match phase {
            Phase::Train => augment(&sized, &self.augmentation, rng),
            Phase::Eval => sized,
        };
        normalize(&sized, &self.mean, &self.std)
    }

    pub fn augments(&self, phase: Phase) -> bool {
        phase == Phase::Train
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())
    }

    #[test]
    fn pad_centres_crop() {
        let img = random_image(50, 60, 1);
        let out = pad_to_target(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.dim(), (224, 224, 3));
        assert_eq!(out.slice(ndarray::s![87..137, 82..142, ..]), img);
        assert_eq!(out[[86, 100, 0]], 1.0);
        assert_eq!(out[[137, 100, 0]], 1.0);
        assert_eq!(out[[100, 81, 2]], 1.0);
        assert_eq!(out[[100, 142, 2]], 1.0);
    }

    #[test]
    fn pad_preserves_pixel_multiset() {
        let img = random_image(30, 17, 2);
        let mut cfg = PreprocessConfig::default();
        cfg.pad_fill = [0.25; 3];
        cfg.target_size = 40;
        let out = pad_to_target(&img, &cfg).unwrap();
        let mut original: Vec<f32> = img.iter().copied().collect();
        let mut padded: Vec<f32> = out.iter().copied().collect();
        let fill_count = 40 * 40 * 3 - original.len();
        original.extend(std::iter::repeat_n(0.25, fill_count));
        original.sort_by(f32::total_cmp);
        padded.sort_by(f32::total_cmp);
        assert_eq!(original, padded);
    }

    #[test]
    fn pad_identity_and_oversize() {
        let img = random_image(224, 224, 3);
        let cfg = PreprocessConfig::default();
        assert_eq!(pad_to_target(&img, &cfg).unwrap(), img);
        let big = random_image(300, 100, 4);
        assert!(matches!(
            pad_to_target(&big, &cfg),
            Err(Error::OversizedInput { height: 300, width: 100, target: 224 })
        ));
    }

    #[test]
    fn resize_identity_constant_and_mean() {
        let cfg = PreprocessConfig {
            strategy: Strategy::Resize,
            ..Default::default()
        };
        let img = random_image(224, 224, 5);
        let same = resize_to_target(&img, &cfg).unwrap();
        let diff = (&same - &img).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(diff <= 1e-6);

        let constant = Array3::from_elem((100, 100, 3), 0.37f32);
        let up = resize_to_target(&constant, &cfg).unwrap();
        assert_eq!(up.dim(), (224, 224, 3));
        assert!(up.iter().all(|v| (v - 0.37).abs() < 1e-6));

        let checker = Array3::from_shape_fn((448, 448, 3), |(y, x, _)| ((y + x) % 2) as f32);
        let mean_before = checker.mean().unwrap();
        let down = resize_to_target(&checker, &cfg).unwrap();
        let mean_after = down.mean().unwrap();
        assert!((mean_after - mean_before).abs() / mean_before < 0.01);

        assert!(matches!(
            resize_to_target(&Array3::zeros((0, 4, 3)), &cfg),
            Err(Error::EmptyImage)
        ));
    }

    #[test]
    fn augment_disabled_is_identity() {
        let img = random_image(32, 32, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentationConfig::disabled(), &mut rng), img);
    }

    #[test]
    fn augment_flip_only_mirrors() {
        let img = random_image(8, 11, 7);
        let cfg = AugmentationConfig {
            flip_prob: 1.0,
            ..AugmentationConfig::disabled()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &cfg, &mut rng);
        let expected = img.slice(ndarray::s![.., ..;-1, ..]).to_owned();
        assert_eq!(out, expected);
    }

    #[test]
    fn augment_is_deterministic_and_shape_preserving() {
        let img = random_image(40, 40, 8);
        let cfg = AugmentationConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(99));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a.dim(), img.dim());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalize_cases() {
        let img = random_image(9, 9, 9);
        assert_eq!(normalize(&img, &[0.0; 3], &[1.0; 3]).unwrap(), img);

        let constant = Array3::from_elem((4, 4, 3), 0.5f32);
        let z = normalize(&constant, &[0.5; 3], &[0.2; 3]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));

        let mean = [0.485, 0.456, 0.406];
        let std = [0.229, 0.224, 0.225];
        let back = denormalize(&normalize(&img, &mean, &std).unwrap(), &mean, &std).unwrap();
        let err = (&back - &img).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(err < 1e-6);

        assert!(matches!(
            normalize(&img, &[0.0; 3], &[1.0, 0.0, 1.0]),
            Err(Error::ZeroStd(1))
        ));
    }

    #[test]
    fn eval_pipeline_never_augments() {
        let pipeline = InputPipeline {
            preprocess: PreprocessConfig {
                target_size: 16,
                ..Default::default()
            },
            augmentation: AugmentationConfig {
                flip_prob: 1.0,
                ..AugmentationConfig::default()
            },
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        assert!(!pipeline.augments(Phase::Eval));
        let img = random_image(10, 12, 10);
        let a = pipeline
            .prepare(&img, Phase::Eval, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = pipeline
            .prepare(&img, Phase::Eval, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, pad_to_target(&img, &pipeline.preprocess).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            crop_scale_range: (0.9, 0.5),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig {
            target_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
