//! Datasets and the sample unit.
//!
//! Pixels are stored as 8-bit integers and interpreted as reals in [0,1]
//! (value/255) everywhere else in the crate. Keeping the byte
//! representation canonical makes duplicate detection a byte comparison
//! and container round-trips exact.

mod container;
pub(crate) mod plane;
mod synthetic;

pub use container::{read_container, write_container, Dataset};
pub use synthetic::generate_synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use plane::Plane;

/// One H×W×C image, row-major and channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageTensor {
    /// Wraps raw bytes. `data` must hold exactly height·width·channels
    /// values; channels must be 1 or 3.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "pixel buffer holds {} bytes, expected {expected} for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from real intensities, clamping to [0,1] and
    /// quantizing to 8 bits (round half away from zero).
    pub fn from_f32(height: usize, width: usize, channels: usize, values: &[f32]) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "value buffer holds {} entries, expected {}",
                values.len(),
                height * width * channels
            )));
        }
        let data = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageTensor::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        let byte = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
        ImageTensor::new(height, width, channels, vec![byte; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Intensity at (y, x, c) as a real in [0,1].
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c] as f32 / 255.0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// The whole pixel plane as reals, in storage order.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

/// Origin tag for pre-training images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Poison,
}

/// Images with class labels, used for downstream training and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<u32>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        check_uniform_shape(&images)?;
        let c = class_names.len() as u32;
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Drops the labels; every image is tagged clean.
    pub fn to_unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            images: self.images.clone(),
            provenance: vec![Provenance::Clean; self.images.len()],
        }
    }
}

/// Pre-training images with per-image provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    pub images: Vec<ImageTensor>,
    pub provenance: Vec<Provenance>,
}

impl UnlabeledDataset {
    pub fn new(images: Vec<ImageTensor>, provenance: Vec<Provenance>) -> Result<Self> {
        if images.len() != provenance.len() {
            return Err(Error::invalid(format!(
                "{} images but {} provenance tags",
                images.len(),
                provenance.len()
            )));
        }
        check_uniform_shape(&images)?;
        Ok(UnlabeledDataset { images, provenance })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_poison(&self) -> usize {
        self.provenance
            .iter()
            .filter(|&&p| p == Provenance::Poison)
            .count()
    }

    /// The subset with the given provenance, in original order.
    pub fn filter_provenance(&self, keep: Provenance) -> UnlabeledDataset {
        let mut images = Vec::new();
        let mut provenance = Vec::new();
        for (img, &p) in self.images.iter().zip(&self.provenance) {
            if p == keep {
                images.push(img.clone());
                provenance.push(p);
            }
        }
        UnlabeledDataset { images, provenance }
    }

    /// Keeps only the images at indices NOT in `drop` (sorted or not).
    pub fn without_indices(&self, drop: &[usize]) -> UnlabeledDataset {
        let dropset: std::collections::HashSet<usize> = drop.iter().copied().collect();
        let mut images = Vec::new();
        let mut provenance = Vec::new();
        for (i, (img, &p)) in self.images.iter().zip(&self.provenance).enumerate() {
            if !dropset.contains(&i) {
                images.push(img.clone());
                provenance.push(p);
            }
        }
        UnlabeledDataset { images, provenance }
    }
}

fn check_uniform_shape(images: &[ImageTensor]) -> Result<()> {
    if let Some(first) = images.first() {
        let shape = first.shape();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(Error::invalid(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    img.shape(),
                    shape
                )));
            }
        }
    }
    Ok(())
}

/// Bilinear rescale to target×target, preserving the channel count.
pub fn rescale(img: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if target == 0 {
        return Err(Error::invalid("rescale target must be at least 1"));
    }
    Ok(Plane::from_image(img)
        .resize_bilinear(target, target)
        .into_image())
}

/// Concatenates two datasets and applies a seeded permutation, keeping
/// each image's provenance tag. Shapes must agree when both are nonempty.
pub fn merge_poison(
    clean: &UnlabeledDataset,
    poison: &UnlabeledDataset,
    seed: u64,
) -> Result<UnlabeledDataset> {
    if let (Some(a), Some(b)) = (clean.images.first(), poison.images.first()) {
        if a.shape() != b.shape() {
            return Err(Error::invalid(format!(
                "clean images are {:?} but poison images are {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    let total = clean.len() + poison.len();
    let mut order: Vec<usize> = (0..total).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng::stream_for(seed, &[tag::MERGE]));

    let mut images = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    for &i in &order {
        if i < clean.len() {
            images.push(clean.images[i].clone());
            provenance.push(clean.provenance[i]);
        } else {
            images.push(poison.images[i - clean.len()].clone());
            provenance.push(poison.provenance[i - clean.len()]);
        }
    }
    Ok(UnlabeledDataset { images, provenance })
}

/// Removes exact duplicates (byte-identical after 8-bit quantization),
/// keeping the first occurrence. Returns the filtered dataset and the
/// removed indices in ascending order.
pub fn dedup(ds: &UnlabeledDataset) -> (UnlabeledDataset, Vec<usize>) {
    let mut seen: std::collections::HashSet<&[u8]> = std::collections::HashSet::new();
    let mut keep_images = Vec::new();
    let mut keep_prov = Vec::new();
    let mut removed = Vec::new();
    for (i, (img, &p)) in ds.images.iter().zip(&ds.provenance).enumerate() {
        if seen.insert(img.bytes()) {
            keep_images.push(img.clone());
            keep_prov.push(p);
        } else {
            removed.push(i);
        }
    }
    (
        UnlabeledDataset {
            images: keep_images,
            provenance: keep_prov,
        },
        removed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img_from_bytes(bytes: &[u8], h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(h, w, 1, bytes.to_vec()).unwrap()
    }

    #[test]
    fn image_tensor_validates_shape() {
        assert!(ImageTensor::new(0, 4, 1, vec![]).is_err());
        assert!(ImageTensor::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0; 3]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0; 4]).is_ok());
    }

    #[test]
    fn intensities_are_bytes_over_255() {
        let img = img_from_bytes(&[0, 51, 255, 128], 2, 2);
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert!((img.get(0, 1, 0) - 0.2).abs() < 1e-6);
        assert_eq!(img.get(1, 0, 0), 1.0);
    }

    #[test]
    fn from_f32_quantizes_and_clamps() {
        let img = ImageTensor::from_f32(1, 4, 1, &[-0.5, 0.5, 1.5, 0.2]).unwrap();
        assert_eq!(img.bytes(), &[0, 128, 255, 51]);
    }

    #[test]
    fn rescale_same_size_is_identity() {
        let img = img_from_bytes(&(0..64).map(|v| (v * 4) as u8).collect::<Vec<_>>(), 8, 8);
        let out = rescale(&img, 8).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn rescale_preserves_constant_images() {
        let img = ImageTensor::constant(64, 64, 3, 0.5).unwrap();
        let out = rescale(&img, 32).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (32, 32, 3));
        for &b in out.bytes() {
            assert_eq!(b, 128);
        }
    }

    #[test]
    fn rescale_checkerboard_matches_hand_computed_bilinear() {
        // 2x2 checkerboard (0,1;1,0) resampled to 4x4 under the
        // half-pixel-center convention. Weights worked out by hand:
        // v(y,x) = tx + ty - 2*tx*ty with tx,ty in {0, 0.25, 0.75, 1}.
        let img = img_from_bytes(&[0, 255, 255, 0], 2, 2);
        let out = rescale(&img, 4).unwrap();
        let expected: &[u8] = &[
            0, 64, 191, 255, //
            64, 96, 159, 191, //
            191, 159, 96, 64, //
            255, 191, 64, 0,
        ];
        assert_eq!(out.bytes(), expected);
    }

    #[test]
    fn merge_preserves_multiset_and_tags() {
        let clean = UnlabeledDataset::new(
            (0..5)
                .map(|i| img_from_bytes(&[i as u8; 4], 2, 2))
                .collect(),
            vec![Provenance::Clean; 5],
        )
        .unwrap();
        let poison = UnlabeledDataset::new(
            vec![img_from_bytes(&[200; 4], 2, 2)],
            vec![Provenance::Poison],
        )
        .unwrap();
        let merged = merge_poison(&clean, &poison, 11).unwrap();
        assert_eq!(merged.len(), 6);
        assert_eq!(merged.n_poison(), 1);
        // The poison image keeps its tag wherever it lands.
        let pos = merged
            .images
            .iter()
            .position(|im| im.bytes()[0] == 200)
            .unwrap();
        assert_eq!(merged.provenance[pos], Provenance::Poison);
        // Multiset of byte planes is conserved.
        let mut a: Vec<&[u8]> = clean
            .images
            .iter()
            .chain(poison.images.iter())
            .map(|im| im.bytes())
            .collect();
        let mut b: Vec<&[u8]> = merged.images.iter().map(|im| im.bytes()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn merge_with_empty_poison_is_a_permutation_of_clean() {
        let clean = UnlabeledDataset::new(
            (0..100)
                .map(|i| img_from_bytes(&[i as u8; 4], 2, 2))
                .collect(),
            vec![Provenance::Clean; 100],
        )
        .unwrap();
        let empty = UnlabeledDataset::new(vec![], vec![]).unwrap();
        let merged = merge_poison(&clean, &empty, 3).unwrap();
        assert_eq!(merged.len(), 100);
        assert_eq!(merged.n_poison(), 0);
        let mut firsts: Vec<u8> = merged.images.iter().map(|im| im.bytes()[0]).collect();
        firsts.sort();
        assert_eq!(firsts, (0..100).map(|i| i as u8).collect::<Vec<_>>());
    }

    #[test]
    fn merge_is_deterministic_per_seed() {
        let clean = UnlabeledDataset::new(
            (0..20)
                .map(|i| img_from_bytes(&[i as u8; 4], 2, 2))
                .collect(),
            vec![Provenance::Clean; 20],
        )
        .unwrap();
        let empty = UnlabeledDataset::new(vec![], vec![]).unwrap();
        let a = merge_poison(&clean, &empty, 7).unwrap();
        let b = merge_poison(&clean, &empty, 7).unwrap();
        let c = merge_poison(&clean, &empty, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn merge_rejects_shape_mismatch() {
        let clean = UnlabeledDataset::new(
            vec![img_from_bytes(&[0; 4], 2, 2)],
            vec![Provenance::Clean],
        )
        .unwrap();
        let poison = UnlabeledDataset::new(
            vec![img_from_bytes(&[0; 9], 3, 3)],
            vec![Provenance::Poison],
        )
        .unwrap();
        assert!(merge_poison(&clean, &poison, 0).is_err());
    }

    #[test]
    fn poisoning_rate_arithmetic() {
        // 500 poisons into 50,000 clean inputs is a 1% poisoning rate.
        let rate = 500.0f64 / 50_000.0;
        assert!((rate - 0.01).abs() < 1e-9);
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let imgs = vec![
            img_from_bytes(&[1; 4], 2, 2),
            img_from_bytes(&[2; 4], 2, 2),
            img_from_bytes(&[1; 4], 2, 2),
            img_from_bytes(&[1; 4], 2, 2),
            img_from_bytes(&[3; 4], 2, 2),
        ];
        let ds = UnlabeledDataset::new(imgs, vec![Provenance::Clean; 5]).unwrap();
        let (kept, removed) = dedup(&ds);
        assert_eq!(kept.len(), 3);
        assert_eq!(removed, vec![2, 3]);
        assert_eq!(kept.images[0].bytes()[0], 1);
        assert_eq!(kept.images[1].bytes()[0], 2);
        assert_eq!(kept.images[2].bytes()[0], 3);
    }

    #[test]
    fn dedup_is_idempotent() {
        let imgs: Vec<ImageTensor> = (0..30)
            .map(|i| img_from_bytes(&[(i % 7) as u8; 4], 2, 2))
            .collect();
        let ds = UnlabeledDataset::new(imgs, vec![Provenance::Clean; 30]).unwrap();
        let (once, _) = dedup(&ds);
        let (twice, removed) = dedup(&once);
        assert!(removed.is_empty());
        assert_eq!(once, twice);
    }

    #[test]
    fn dedup_on_distinct_dataset_removes_nothing() {
        let imgs: Vec<ImageTensor> = (0..10)
            .map(|i| img_from_bytes(&[i as u8, 0, 0, 0], 2, 2))
            .collect();
        let ds = UnlabeledDataset::new(imgs, vec![Provenance::Clean; 10]).unwrap();
        let (kept, removed) = dedup(&ds);
        assert!(removed.is_empty());
        assert_eq!(kept, ds);
    }
}
