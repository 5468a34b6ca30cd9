//! Stochastic view generation for contrastive pre-training.
//!
//! Each pre-training input is transformed into two augmented views that
//! form a positive pair. The pipeline order is fixed: random resized
//! crop, horizontal flip, color jitter, grayscale, Gaussian blur. All
//! randomness comes from a caller-supplied ChaCha stream and the draw
//! order is part of the contract (tests replay it), documented on each
//! operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::plane::Plane;
use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// Augmentation settings. Defaults follow common SimCLR-style practice:
/// crop scale [0.08, 1], flip 0.5, jitter strength 0.4 applied with
/// probability 0.8, grayscale 0.2, blur sigma [0.1, 2] with probability
/// 0.5. They are recorded in every experiment config so runs are
/// explicit about what they used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_scale_range: [f64; 2],
    pub aspect_ratio_range: [f64; 2],
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_sigma_range: [f64; 2],
    pub blur_prob: f64,
    pub enable_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_range: [0.08, 1.0],
            aspect_ratio_range: [0.75, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_strength: 0.4,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_sigma_range: [0.1, 2.0],
            blur_prob: 0.5,
            enable_crop: true,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves every image untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale_range: [1.0, 1.0],
            aspect_ratio_range: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_strength: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_sigma_range: [0.1, 0.1],
            blur_prob: 0.0,
            enable_crop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "crop_scale_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        let [alo, ahi] = self.aspect_ratio_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::invalid(format!(
                "aspect_ratio_range must satisfy 0 < lo <= hi, got [{alo}, {ahi}]"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.jitter_strength < 0.0 {
            return Err(Error::invalid(format!(
                "jitter_strength must be nonnegative, got {}",
                self.jitter_strength
            )));
        }
        let [blo, bhi] = self.blur_sigma_range;
        if !(blo > 0.0 && blo <= bhi) {
            return Err(Error::invalid(format!(
                "blur_sigma_range must satisfy 0 < lo <= hi, got [{blo}, {bhi}]"
            )));
        }
        Ok(())
    }
}

/// Chooses the crop region for an H×W image: area fraction `s` uniform in
/// `scale_range`, aspect ratio log-uniform in `ratio_range` clamped so
/// the region fits while preserving the sampled area, then a uniform
/// position.
///
/// Draw order (frozen): area fraction, aspect ratio, row offset, column
/// offset. Returns (y0, x0, crop_h, crop_w).
fn sample_crop_region(
    height: usize,
    width: usize,
    scale_range: [f64; 2],
    ratio_range: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let s = rng.random_range(scale_range[0]..=scale_range[1]);
    let log_ratio = (ratio_range[0].ln(), ratio_range[1].ln());
    let ratio = rng.random_range(log_ratio.0..=log_ratio.1).exp();

    let area = s * height as f64 * width as f64;
    let mut crop_w = (area * ratio).sqrt();
    let mut crop_h = area / crop_w;
    if crop_w > width as f64 {
        crop_w = width as f64;
        crop_h = area / crop_w;
    }
    if crop_h > height as f64 {
        crop_h = height as f64;
        crop_w = (area / crop_h).min(width as f64);
    }
    let crop_w = (crop_w.round() as usize).clamp(1, width);
    let crop_h = (crop_h.round() as usize).clamp(1, height);

    let y0 = rng.random_range(0..=height - crop_h);
    let x0 = rng.random_range(0..=width - crop_w);
    (y0, x0, crop_h, crop_w)
}

/// Random resized crop: samples a region (see [`sample_crop_region`])
/// and bilinearly rescales it back to the input size.
pub fn random_crop(
    img: &ImageTensor,
    scale_range: [f64; 2],
    ratio_range: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let plane = Plane::from_image(img);
    let cropped = crop_plane(&plane, scale_range, ratio_range, rng);
    cropped
        .resize_bilinear(img.height(), img.width())
        .into_image()
}

fn crop_plane(
    plane: &Plane,
    scale_range: [f64; 2],
    ratio_range: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Plane {
    let (y0, x0, h, w) =
        sample_crop_region(plane.height, plane.width, scale_range, ratio_range, rng);
    plane.crop(y0, x0, h, w)
}

/// One augmented view. Stages run in a fixed order and each stage's coin
/// is drawn whether or not the stage applies; parameter draws (jitter
/// factors, blur sigma) happen only when the coin passes.
///
/// Draw order (frozen): crop draws if enable_crop; flip coin; jitter
/// coin, then brightness/contrast/saturation factors; grayscale coin;
/// blur coin, then sigma.
pub fn augment_view(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut plane = Plane::from_image(img);

    if cfg.enable_crop {
        plane = crop_plane(&plane, cfg.crop_scale_range, cfg.aspect_ratio_range, rng)
            .resize_bilinear(img.height(), img.width());
    }

    if rng.random::<f64>() < cfg.flip_prob {
        plane = plane.flip_horizontal();
    }

    if rng.random::<f64>() < cfg.jitter_prob {
        let s = cfg.jitter_strength;
        let fb = rng.random_range(1.0 - s..=1.0 + s).max(0.0) as f32;
        let fc = rng.random_range(1.0 - s..=1.0 + s).max(0.0) as f32;
        let fs = rng.random_range(1.0 - s..=1.0 + s).max(0.0) as f32;
        apply_brightness(&mut plane, fb);
        apply_contrast(&mut plane, fc);
        apply_saturation(&mut plane, fs);
    }

    if rng.random::<f64>() < cfg.grayscale_prob {
        apply_grayscale(&mut plane);
    }

    if rng.random::<f64>() < cfg.blur_prob {
        let sigma = rng.random_range(cfg.blur_sigma_range[0]..=cfg.blur_sigma_range[1]);
        plane = gaussian_blur(&plane, sigma as f32);
    }

    plane.into_image()
}

/// Two independent draws of [`augment_view`] from the same stream; the
/// positive pair for contrastive training.
pub fn two_views(
    img: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, ImageTensor) {
    let a = augment_view(img, cfg, rng);
    let b = augment_view(img, cfg, rng);
    (a, b)
}

fn luma_at(plane: &Plane, y: usize, x: usize) -> f32 {
    if plane.channels == 1 {
        plane.get(y, x, 0)
    } else {
        0.299 * plane.get(y, x, 0) + 0.587 * plane.get(y, x, 1) + 0.114 * plane.get(y, x, 2)
    }
}

fn apply_brightness(plane: &mut Plane, factor: f32) {
    for v in &mut plane.data {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

/// Pulls every value toward (factor < 1) or away from (factor > 1) the
/// mean luma of the current plane.
fn apply_contrast(plane: &mut Plane, factor: f32) {
    let mut mean = 0.0f32;
    for y in 0..plane.height {
        for x in 0..plane.width {
            mean += luma_at(plane, y, x);
        }
    }
    mean /= (plane.height * plane.width) as f32;
    for v in &mut plane.data {
        *v = (mean + (*v - mean) * factor).clamp(0.0, 1.0);
    }
}

/// Blends each pixel with its own luma; identity for single-channel
/// images.
fn apply_saturation(plane: &mut Plane, factor: f32) {
    if plane.channels == 1 {
        return;
    }
    for y in 0..plane.height {
        for x in 0..plane.width {
            let l = luma_at(plane, y, x);
            for c in 0..plane.channels {
                let v = plane.get(y, x, c);
                plane.set(y, x, c, (l + (v - l) * factor).clamp(0.0, 1.0));
            }
        }
    }
}

fn apply_grayscale(plane: &mut Plane) {
    if plane.channels == 1 {
        return;
    }
    for y in 0..plane.height {
        for x in 0..plane.width {
            let l = luma_at(plane, y, x);
            for c in 0..plane.channels {
                plane.set(y, x, c, l);
            }
        }
    }
}

/// Separable Gaussian blur with replicated edges. Kernel radius is
/// ceil(3·sigma), at least 1.
fn gaussian_blur(plane: &Plane, sigma: f32) -> Plane {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        kernel.push((-d * d / denom).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let h = plane.height as isize;
    let w = plane.width as isize;
    let r = radius as isize;

    // Horizontal pass, then vertical.
    let mut tmp = Plane::zeros(plane.height, plane.width, plane.channels);
    for y in 0..plane.height {
        for x in 0..w {
            for c in 0..plane.channels {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sx = (x + i as isize - r).clamp(0, w - 1) as usize;
                    acc += k * plane.get(y, sx, c);
                }
                tmp.set(y, x as usize, c, acc);
            }
        }
    }
    let mut out = Plane::zeros(plane.height, plane.width, plane.channels);
    for y in 0..h {
        for x in 0..plane.width {
            for c in 0..plane.channels {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sy = (y + i as isize - r).clamp(0, h - 1) as usize;
                    acc += k * tmp.get(sy, x, c);
                }
                out.set(y as usize, x, c, acc);
            }
        }
    }
    out
}
