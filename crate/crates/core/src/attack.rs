//! Poison construction and attacker-side scoring.
//!
//! The attack builds unlabeled poisoning inputs that tie chosen target
//! images to a victim class's reference images. Each poison is a
//! two-image collage: the target and one reference are stacked top/bottom
//! or left/right (four method variants) and rescaled back to the working
//! size, optionally after an evasion crop of each half. An interpolation
//! baseline blends target and reference pixel-wise instead. A
//! gradient-alignment score measures how well the poison batch's
//! contrastive gradient matches the direction that raises the attacker's
//! objective.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::plane::Plane;
use crate::data::{
    read_container, write_container, Dataset, ImageTensor, Provenance, UnlabeledDataset,
};
use crate::error::{Error, Result};
use crate::model::EncoderState;
use crate::pretrain::{interleaved_pairing, simclr_loss, PretrainConfig};
use crate::rng::{self, tag};

/// The four collage layouts. The index names which half holds the
/// target: 1 = top target / bottom reference, 2 = top reference / bottom
/// target, 3 = left target / right reference, 4 = left reference / right
/// target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CombineMethod {
    TopTargetBottomReference,
    TopReferenceBottomTarget,
    LeftTargetRightReference,
    LeftReferenceRightTarget,
}

impl CombineMethod {
    pub const ALL: [CombineMethod; 4] = [
        CombineMethod::TopTargetBottomReference,
        CombineMethod::TopReferenceBottomTarget,
        CombineMethod::LeftTargetRightReference,
        CombineMethod::LeftReferenceRightTarget,
    ];

    pub fn index(self) -> u8 {
        match self {
            CombineMethod::TopTargetBottomReference => 1,
            CombineMethod::TopReferenceBottomTarget => 2,
            CombineMethod::LeftTargetRightReference => 3,
            CombineMethod::LeftReferenceRightTarget => 4,
        }
    }
}

impl TryFrom<u8> for CombineMethod {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(CombineMethod::TopTargetBottomReference),
            2 => Ok(CombineMethod::TopReferenceBottomTarget),
            3 => Ok(CombineMethod::LeftTargetRightReference),
            4 => Ok(CombineMethod::LeftReferenceRightTarget),
            _ => Err(Error::invalid(format!(
                "combination method must be 1..=4, got {v}"
            ))),
        }
    }
}

impl From<CombineMethod> for u8 {
    fn from(m: CombineMethod) -> u8 {
        m.index()
    }
}

/// One attack task: a set of target inputs, the class each should be
/// misclassified as, and reference inputs drawn from that class.
#[derive(Debug, Clone)]
pub struct AttackTask {
    pub targets: Vec<ImageTensor>,
    pub target_classes: Vec<u32>,
    /// References per target, indexed like `targets`.
    pub references: Vec<Vec<ImageTensor>>,
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub tasks: Vec<AttackTask>,
    /// Number of poisoning inputs to construct.
    pub budget: usize,
    pub methods: Vec<CombineMethod>,
    /// Area fraction for evasion cropping; 1.0 disables it.
    pub evasion_crop_scale: f64,
    pub seed: u64,
}

impl AttackSpec {
    /// Side length of the square working size shared by every image.
    pub fn working_size(&self) -> usize {
        self.tasks[0].targets[0].height()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("attack needs at least one task"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods must be nonempty"));
        }
        if !(self.evasion_crop_scale > 0.0 && self.evasion_crop_scale <= 1.0) {
            return Err(Error::invalid(format!(
                "evasion_crop_scale must lie in (0,1], got {}",
                self.evasion_crop_scale
            )));
        }
        let mut shape: Option<(usize, usize, usize)> = None;
        let mut check = |img: &ImageTensor, what: String| -> Result<()> {
            let s = img.shape();
            if s.0 != s.1 {
                return Err(Error::invalid(format!(
                    "{what} is {}x{}, the working size must be square",
                    s.0, s.1
                )));
            }
            match shape {
                None => shape = Some(s),
                Some(expect) if expect != s => {
                    return Err(Error::invalid(format!(
                        "{what} has shape {s:?}, expected {expect:?}"
                    )))
                }
                _ => {}
            }
            Ok(())
        };
        for (t, task) in self.tasks.iter().enumerate() {
            if task.targets.is_empty() {
                return Err(Error::invalid(format!("task {t} has no targets")));
            }
            if task.targets.len() != task.target_classes.len()
                || task.targets.len() != task.references.len()
            {
                return Err(Error::invalid(format!(
                    "task {t}: targets, target_classes, and references must align"
                )));
            }
            for (i, img) in task.targets.iter().enumerate() {
                check(img, format!("task {t} target {i}"))?;
                if task.references[i].is_empty() {
                    return Err(Error::invalid(format!(
                        "task {t} target {i} has no references"
                    )));
                }
                for (r, rimg) in task.references[i].iter().enumerate() {
                    check(rimg, format!("task {t} target {i} reference {r}"))?;
                }
            }
        }
        Ok(())
    }

    /// All (task, target) index pairs, flattened in declaration order.
    fn target_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for i in 0..task.targets.len() {
                pairs.push((t, i));
            }
        }
        pairs
    }
}

/// How one poisoning image was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoisonOrigin {
    Combined {
        method: CombineMethod,
        crop_scale: f64,
        /// (row, col) offset of the evasion crop in the target.
        target_crop: (usize, usize),
        /// (row, col) offset of the evasion crop in the reference.
        reference_crop: (usize, usize),
    },
    Interpolated { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonRecord {
    pub task: usize,
    pub target: usize,
    pub reference: usize,
    pub origin: PoisonOrigin,
}

#[derive(Debug, Clone)]
pub struct PoisonBatch {
    pub images: Vec<ImageTensor>,
    pub records: Vec<PoisonRecord>,
}

impl PoisonBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// All images tagged as poison, ready to merge into clean data.
    pub fn to_dataset(&self) -> UnlabeledDataset {
        UnlabeledDataset::new(
            self.images.clone(),
            vec![Provenance::Poison; self.images.len()],
        )
        .expect("poison batch is internally consistent")
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    records: Vec<PoisonRecord>,
}

/// Writes the batch as an image container plus a JSON sidecar holding
/// the per-image construction records.
pub fn save_poison(batch: &PoisonBatch, container: &Path, sidecar: &Path) -> Result<()> {
    if batch.images.len() != batch.records.len() {
        return Err(Error::invalid(format!(
            "{} images but {} records",
            batch.images.len(),
            batch.records.len()
        )));
    }
    write_container(&Dataset::Unlabeled(batch.to_dataset()), container)?;
    let json = serde_json::to_vec_pretty(&Sidecar {
        records: batch.records.clone(),
    })
    .map_err(|e| Error::invalid(format!("encode records: {e}")))?;
    std::fs::write(sidecar, json).map_err(|e| Error::io(sidecar, e))
}

pub fn load_poison(container: &Path, sidecar: &Path) -> Result<PoisonBatch> {
    let ds = read_container(container)?.into_unlabeled()?;
    let bytes = std::fs::read(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let side: Sidecar = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(sidecar, 0, format!("bad sidecar: {e}")))?;
    if side.records.len() != ds.images.len() {
        return Err(Error::format(
            sidecar,
            0,
            format!(
                "{} records for {} images",
                side.records.len(),
                ds.images.len()
            ),
        ));
    }
    Ok(PoisonBatch {
        images: ds.images,
        records: side.records,
    })
}

/// Stacks target and reference per the method, then rescales the collage
/// to `out_size`×`out_size`.
pub fn combine(
    target: &ImageTensor,
    reference: &ImageTensor,
    method: CombineMethod,
    out_size: usize,
) -> Result<ImageTensor> {
    if target.shape() != reference.shape() {
        return Err(Error::invalid(format!(
            "target {:?} and reference {:?} must share shape",
            target.shape(),
            reference.shape()
        )));
    }
    if out_size == 0 {
        return Err(Error::invalid("out_size must be at least 1"));
    }
    let t = Plane::from_image(target);
    let r = Plane::from_image(reference);
    let stacked = match method {
        CombineMethod::TopTargetBottomReference => Plane::stack_vertical(&t, &r),
        CombineMethod::TopReferenceBottomTarget => Plane::stack_vertical(&r, &t),
        CombineMethod::LeftTargetRightReference => Plane::stack_horizontal(&t, &r),
        CombineMethod::LeftReferenceRightTarget => Plane::stack_horizontal(&r, &t),
    };
    Ok(stacked.resize_bilinear(out_size, out_size).into_image())
}

/// Crops a random square of side ⌊√s_a · side⌋ and rescales it back to
/// the input size. Returns the image and the (row, col) crop offset.
/// Draw order: row offset, then column offset, both inclusive-uniform.
pub fn evasion_crop(
    img: &ImageTensor,
    s_a: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, (usize, usize))> {
    if !(s_a > 0.0 && s_a <= 1.0) {
        return Err(Error::invalid(format!(
            "crop scale must lie in (0,1], got {s_a}"
        )));
    }
    let (h, w, _) = img.shape();
    let side = h.min(w);
    let crop_side = ((s_a.sqrt() * side as f64).floor() as usize).max(1);
    let y0 = rng.random_range(0..=h - crop_side);
    let x0 = rng.random_range(0..=w - crop_side);
    let plane = Plane::from_image(img)
        .crop(y0, x0, crop_side, crop_side)
        .resize_bilinear(h, w);
    Ok((plane.into_image(), (y0, x0)))
}

/// Builds the poison batch. Each poison index draws from its own stream:
/// flat (task, target) pair, reference, method, then the two evasion
/// crops (target first), making construction order-independent and
/// byte-reproducible.
pub fn build_poison(spec: &AttackSpec) -> Result<PoisonBatch> {
    spec.validate()?;
    let pairs = spec.target_pairs();
    let out_size = spec.working_size();
    let mut images = Vec::with_capacity(spec.budget);
    let mut records = Vec::with_capacity(spec.budget);
    for idx in 0..spec.budget {
        let mut r = rng::stream_for(spec.seed, &[tag::POISON, idx as u64]);
        let (t, i) = pairs[r.random_range(0..pairs.len())];
        let task = &spec.tasks[t];
        let ref_idx = r.random_range(0..task.references[i].len());
        let method = spec.methods[r.random_range(0..spec.methods.len())];
        let (cropped_target, target_crop) =
            evasion_crop(&task.targets[i], spec.evasion_crop_scale, &mut r)?;
        let (cropped_ref, reference_crop) = evasion_crop(
            &task.references[i][ref_idx],
            spec.evasion_crop_scale,
            &mut r,
        )?;
        images.push(combine(&cropped_target, &cropped_ref, method, out_size)?);
        records.push(PoisonRecord {
            task: t,
            target: i,
            reference: ref_idx,
            origin: PoisonOrigin::Combined {
                method,
                crop_scale: spec.evasion_crop_scale,
                target_crop,
                reference_crop,
            },
        });
    }
    Ok(PoisonBatch { images, records })
}

/// Interpolation baseline: each sampled (target, reference) pair emits
/// pixel blends (1−α)·reference + α·target for α evenly spaced over
/// [0,1] with `n_steps` points, cycling new pairs until the budget is
/// met. No evasion cropping is applied.
pub fn build_icp_poison(spec: &AttackSpec, n_steps: usize) -> Result<PoisonBatch> {
    spec.validate()?;
    if n_steps < 2 {
        return Err(Error::invalid(format!(
            "interpolation needs at least 2 steps, got {n_steps}"
        )));
    }
    let pairs = spec.target_pairs();
    let mut r = rng::stream_for(spec.seed, &[tag::POISON]);
    let mut images = Vec::with_capacity(spec.budget);
    let mut records = Vec::with_capacity(spec.budget);
    while images.len() < spec.budget {
        let (t, i) = pairs[r.random_range(0..pairs.len())];
        let task = &spec.tasks[t];
        let ref_idx = r.random_range(0..task.references[i].len());
        let target = task.targets[i].to_f32();
        let reference = task.references[i][ref_idx].to_f32();
        let (h, w, c) = task.targets[i].shape();
        for j in 0..n_steps {
            if images.len() == spec.budget {
                break;
            }
            let alpha = j as f64 / (n_steps - 1) as f64;
            let a = alpha as f32;
            let blend: Vec<f32> = reference
                .iter()
                .zip(&target)
                .map(|(&rv, &tv)| (1.0 - a) * rv + a * tv)
                .collect();
            images.push(ImageTensor::from_f32(h, w, c, &blend)?);
            records.push(PoisonRecord {
                task: t,
                target: i,
                reference: ref_idx,
                origin: PoisonOrigin::Interpolated { alpha },
            });
        }
    }
    Ok(PoisonBatch { images, records })
}

/// Flattened backbone gradient of the attacker objective: the mean
/// cosine similarity between each target's features and each of its
/// references' features. Returns (objective value, ∇θ).
pub(crate) fn outer_objective_grad(
    state: &EncoderState,
    spec: &AttackSpec,
) -> Result<(f64, Vec<f32>)> {
    spec.validate()?;
    // One combined batch: targets first, then reference groups, with
    // row ranges remembered per (task, target).
    let mut batch: Vec<ImageTensor> = Vec::new();
    let mut target_rows: Vec<usize> = Vec::new();
    let mut ref_rows: Vec<Vec<usize>> = Vec::new();
    for task in &spec.tasks {
        for (i, img) in task.targets.iter().enumerate() {
            target_rows.push(batch.len());
            batch.push(img.clone());
            let rows: Vec<usize> =
                (0..task.references[i].len()).map(|k| batch.len() + k).collect();
            batch.extend(task.references[i].iter().cloned());
            ref_rows.push(rows);
        }
    }

    let x = crate::model::batch_to_array(&batch)?;
    let (features, pass) = state.encoder.forward_cached(x);
    let (n, d) = features.dim();

    // f64 copies, norms, and unit rows.
    let mut rows = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let v: Vec<f64> = (0..d).map(|j| f64::from(features[(i, j)])).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numerical(
                "outer objective",
                format!("feature row {i} has norm {norm}"),
            ));
        }
        norms.push(norm);
        rows.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }

    let total_pairs: usize = ref_rows.iter().map(|r| r.len()).sum();
    let scale = 1.0 / total_pairs as f64;
    let mut value = 0.0f64;
    let mut grad = vec![vec![0.0f64; d]; n];
    for (ti, &trow) in target_rows.iter().enumerate() {
        for &rrow in &ref_rows[ti] {
            let c: f64 = rows[trow]
                .iter()
                .zip(&rows[rrow])
                .map(|(a, b)| a * b)
                .sum();
            value += c;
            // d cos / d f_t = (u_r − c·u_t)/‖f_t‖, symmetric for f_r.
            for j in 0..d {
                grad[trow][j] += scale * (rows[rrow][j] - c * rows[trow][j]) / norms[trow];
                grad[rrow][j] += scale * (rows[trow][j] - c * rows[rrow][j]) / norms[rrow];
            }
        }
    }
    value *= scale;

    let grad_features =
        Array2::from_shape_fn((n, d), |(i, j)| grad[i][j] as f32);
    let egrads = state.encoder.backward(&pass, &grad_features);
    let flat: Vec<f32> = egrads.views().into_iter().flatten().copied().collect();
    Ok((value, flat))
}

/// Contrastive loss over two augmented views of every poison image,
/// with its flattened backbone gradient. View streams derive from
/// (seed, poison index) so the loss is a fixed function of parameters.
pub(crate) fn poison_contrastive_grad(
    state: &EncoderState,
    poison: &PoisonBatch,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(f64, Vec<f32>)> {
    if poison.is_empty() {
        return Err(Error::invalid("poison batch is empty"));
    }
    let mut views = Vec::with_capacity(2 * poison.len());
    for (idx, img) in poison.images.iter().enumerate() {
        let mut r = rng::stream_for(seed, &[tag::ALIGN, idx as u64]);
        let (a, b) = crate::augment::two_views(img, &cfg.augment, &mut r);
        views.push(a);
        views.push(b);
    }
    let x = crate::model::batch_to_array(&views)?;
    let (features, epass) = state.encoder.forward_cached(x);
    let (proj, hpass) = state.head.forward_cached(features);
    let pairing = interleaved_pairing(views.len());
    let (loss, grad_proj) = simclr_loss(&proj, &pairing, cfg.temperature)?;
    let (grad_features, _hgrads) = state.head.backward(&hpass, &grad_proj);
    let egrads = state.encoder.backward(&epass, &grad_features);
    let flat: Vec<f32> = egrads.views().into_iter().flatten().copied().collect();
    Ok((loss, flat))
}

fn cosine_f64(a: &[f32], b: &[f32]) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical(
            "gradient alignment",
            "one gradient vector is identically zero",
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Cosine similarity between the backbone gradient that would raise the
/// attacker objective (−∇θ of the negated target/reference similarity,
/// i.e. the ascent direction) and the backbone gradient of the
/// contrastive loss on the poison batch alone. The in-batch contrastive
/// loss is used regardless of `cfg.algorithm`, since key gradients are
/// zero by construction in the momentum variant.
pub fn gradient_alignment_score(
    state: &EncoderState,
    poison: &PoisonBatch,
    spec: &AttackSpec,
    cfg: &PretrainConfig,
) -> Result<f64> {
    let (_, sim_grad) = outer_objective_grad(state, spec)?;
    // Gradient of the negated objective: descending the contrastive
    // loss along its own gradient raises the attacker objective exactly
    // when these two directions agree, so +1 is a perfectly aligned
    // poison batch.
    let neg_grad: Vec<f32> = sim_grad.iter().map(|&g| -g).collect();
    let (_, poison_grad) = poison_contrastive_grad(state, poison, cfg, spec.seed)?;
    cosine_f64(&neg_grad, &poison_grad)
}

/// Derivative-free ascent on poison pixels to raise the alignment
/// score: per step, a single Rademacher perturbation estimates the
/// directional derivative (simultaneous perturbation), pixels move along
/// the estimate and are projected back to [0,1]. Images are re-quantized
/// once at the end; records are carried over unchanged.
pub fn optimize_poison_alignment(
    state: &EncoderState,
    poison: &PoisonBatch,
    spec: &AttackSpec,
    cfg: &PretrainConfig,
    n_steps: usize,
    step_size: f32,
    probe: f32,
) -> Result<PoisonBatch> {
    if poison.is_empty() {
        return Err(Error::invalid("poison batch is empty"));
    }
    if !(step_size > 0.0) || !(probe > 0.0) {
        return Err(Error::invalid("step_size and probe must be positive"));
    }
    let shapes: Vec<(usize, usize, usize)> = poison.images.iter().map(|i| i.shape()).collect();
    let mut pixels: Vec<Vec<f32>> = poison.images.iter().map(|i| i.to_f32()).collect();
    let mut r = rng::stream_for(spec.seed, &[tag::ASCENT]);

    let score_of = |pixels: &[Vec<f32>]| -> Result<f64> {
        let images: Result<Vec<ImageTensor>> = pixels
            .iter()
            .zip(&shapes)
            .map(|(p, &(h, w, c))| ImageTensor::from_f32(h, w, c, p))
            .collect();
        let batch = PoisonBatch {
            images: images?,
            records: poison.records.clone(),
        };
        gradient_alignment_score(state, &batch, spec, cfg)
    };

    for _ in 0..n_steps {
        let signs: Vec<Vec<f32>> = pixels
            .iter()
            .map(|p| {
                p.iter()
                    .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let perturb = |dir: f32| -> Vec<Vec<f32>> {
            pixels
                .iter()
                .zip(&signs)
                .map(|(p, s)| {
                    p.iter()
                        .zip(s)
                        .map(|(&v, &sv)| (v + dir * probe * sv).clamp(0.0, 1.0))
                        .collect()
                })
                .collect()
        };
        let plus = score_of(&perturb(1.0))?;
        let minus = score_of(&perturb(-1.0))?;
        let slope = ((plus - minus) / (2.0 * f64::from(probe))) as f32;
        for (p, s) in pixels.iter_mut().zip(&signs) {
            for (v, &sv) in p.iter_mut().zip(s) {
                *v = (*v + step_size * slope * sv).clamp(0.0, 1.0);
            }
        }
    }

    let images: Result<Vec<ImageTensor>> = pixels
        .iter()
        .zip(&shapes)
        .map(|(p, &(h, w, c))| ImageTensor::from_f32(h, w, c, p))
        .collect();
    Ok(PoisonBatch {
        images: images?,
        records: poison.records.clone(),
    })
}
