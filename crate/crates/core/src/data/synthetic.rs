//! Synthetic shape/color dataset generator.
//!
//! Desk-scale stand-in for real image corpora: each class is a distinct
//! (shape, color) family rendered procedurally, with per-sample jitter in
//! position, size, tint, and pixel noise. Classes are balanced and
//! linearly separable on raw pixels, which downstream tests rely on.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

use super::{ImageTensor, LabeledDataset};

/// Generates `n_classes` balanced classes of `n_per_class` RGB images at
/// `size`×`size`. Sample j of class c draws from its own stream derived
/// from (seed, c, j), so datasets grow stably: adding samples or classes
/// never changes existing images.
pub fn generate_synthetic(
    n_per_class: usize,
    n_classes: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class < 1 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    if n_classes < 2 {
        return Err(Error::invalid("n_classes must be at least 2"));
    }
    if size < 8 {
        return Err(Error::invalid("size must be at least 8 pixels"));
    }

    let mut images = Vec::with_capacity(n_per_class * n_classes);
    let mut labels = Vec::with_capacity(n_per_class * n_classes);
    for class in 0..n_classes {
        for sample in 0..n_per_class {
            images.push(render_sample(class, sample, size, seed)?);
            labels.push(class as u32);
        }
    }
    let class_names = (0..n_classes).map(|c| format!("class_{c}")).collect();
    LabeledDataset::new(images, labels, class_names)
}

/// Class hues are spaced by the golden angle so any number of classes
/// stays well separated on the hue circle.
fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Signed distance (negative inside) from point (dx, dy) relative to the
/// shape center, for the class's base shape. Shapes cycle with period 6.
/// Callers rotate (dx, dy) beforehand; the disc and ring ignore it.
fn shape_distance(shape: usize, dx: f32, dy: f32, r: f32) -> f32 {
    match shape % 6 {
        // disc
        0 => (dx * dx + dy * dy).sqrt() - r,
        // square
        1 => dx.abs().max(dy.abs()) - 0.85 * r,
        // upward equilateral triangle: max over three edge half-planes
        2 => {
            let bottom = dy - 0.5 * r;
            let right = 0.866 * dx - 0.5 * dy - 0.5 * r;
            let left = -0.866 * dx - 0.5 * dy - 0.5 * r;
            bottom.max(right).max(left)
        }
        // ring
        3 => ((dx * dx + dy * dy).sqrt() - 0.75 * r).abs() - 0.3 * r,
        // cross
        4 => {
            let horiz = (dx.abs() - r).max(dy.abs() - 0.35 * r);
            let vert = (dx.abs() - 0.35 * r).max(dy.abs() - r);
            horiz.min(vert)
        }
        // diamond
        _ => (dx.abs() + dy.abs()) - 1.15 * r,
    }
}

/// Draw order per sample (frozen): center x, center y, radius factor,
/// rotation angle, hue offset, saturation, value, background level, then
/// size² noise values. The hue jitter (±0.05) is small against the
/// golden-angle class spacing, so classes never overlap in hue; the wide
/// saturation/value/size/rotation spread is deliberate, making each
/// sample individually recognizable the way photographs are.
fn render_sample(class: usize, sample: usize, size: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = rng::stream_for(seed, &[tag::SYNTH, class as u64, sample as u64]);
    let half = size as f32 / 2.0;
    let cx = half + rng.random_range(-0.03f32..0.03) * size as f32;
    let cy = half + rng.random_range(-0.03f32..0.03) * size as f32;
    let radius = rng.random_range(0.38f32..0.46) * size as f32;
    // Rotation is drawn for every shape, including the rotationally
    // symmetric ones, to keep the stream layout uniform across classes.
    let theta = rng.random_range(0.0f32..std::f32::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();
    let hue = (class as f32 * 0.618_034 + rng.random_range(-0.05f32..0.05)).rem_euclid(1.0);
    let sat = rng.random_range(0.55f32..0.95);
    let val = rng.random_range(0.7f32..1.0);
    let fg = hsv_to_rgb(hue, sat, val);
    // The foreground spread above makes samples individually
    // recognizable; the background stays in a narrower band so images
    // of one provenance remain mutually close in pixel space.
    let bg = rng.random_range(0.12f32..0.24);

    let aa = 1.5; // soft-edge width in pixels
    let mut values = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let rx = cos_t * dx - sin_t * dy;
            let ry = sin_t * dx + cos_t * dy;
            let d = shape_distance(class, rx, ry, radius);
            let cover = (0.5 - d / aa).clamp(0.0, 1.0);
            let noise = rng.random_range(-0.08f32..0.08);
            let at = (y * size + x) * 3;
            for ch in 0..3 {
                values[at + ch] = bg + cover * (fg[ch] - bg) + noise;
            }
        }
    }
    ImageTensor::from_f32(size, size, 3, &values)
}
