//! Linear evaluation and attack metrics.
//!
//! A frozen encoder turns images into feature vectors; a single linear
//! layer trained with softmax cross-entropy provides the downstream
//! classifier. Metrics: clean accuracy (CA) on a clean encoder, poisoned
//! accuracy (PA) on the attacked encoder, attack success rate (ASR: the
//! fraction of target inputs predicted as their attacker-chosen class),
//! and the attacker objective itself — the mean cosine similarity
//! between target and reference features.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::data::{ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{forward_features, EncoderState};
use crate::nn::Adam;
use crate::rng::{self, tag};

/// Evaluation batches are capped so feature extraction over large sets
/// keeps a bounded working set.
const EVAL_CHUNK: usize = 256;

/// Linear-evaluation hyperparameters. Seeds are passed alongside, not
/// stored, so one config can serve many deterministic runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            epochs: 40,
            learning_rate: 0.01,
            batch_size: 64,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "downstream learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("downstream batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// [feature_dim, C].
    pub weights: Array2<f32>,
    /// [C].
    pub biases: Array1<f32>,
    pub class_names: Vec<String>,
}

impl LinearClassifier {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Raw logits for a feature matrix: [N, C].
    pub fn logits(&self, features: &Array2<f32>) -> Array2<f32> {
        let mut out = features.dot(&self.weights);
        for mut row in out.rows_mut() {
            row += &self.biases;
        }
        out
    }

    /// Predicted class per row; argmax ties break to the smallest index.
    pub fn predict(&self, features: &Array2<f32>) -> Vec<u32> {
        let logits = self.logits(features);
        logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Feature matrix for a set of images: row i = features of image i.
/// Chunked internally; the chunking is part of the frozen evaluation
/// order.
pub fn extract_features(state: &EncoderState, images: &[ImageTensor]) -> Result<Array2<f32>> {
    if images.is_empty() {
        return Err(Error::invalid("no images to extract features from"));
    }
    let mut out = Array2::<f32>::zeros((images.len(), state.arch.feature_dim));
    let mut row = 0usize;
    for chunk in images.chunks(EVAL_CHUNK) {
        let feats = forward_features(state, chunk)?;
        for r in feats.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    Ok(out)
}

/// Trains the linear classifier with softmax cross-entropy and the
/// adaptive-moment optimizer from zero-initialized parameters.
/// Deterministic per seed; the trailing partial batch is kept.
pub fn train_linear(
    features: &Array2<f32>,
    labels: &[u32],
    class_names: &[String],
    epochs: usize,
    learning_rate: f32,
    batch_size: usize,
    seed: u64,
) -> Result<LinearClassifier> {
    let (n, d) = features.dim();
    let c = class_names.len();
    if c < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    if n < c {
        return Err(Error::invalid(format!(
            "need at least as many examples ({n}) as classes ({c})"
        )));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if !(learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be positive"));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= c {
            return Err(Error::invalid(format!(
                "label {l} at row {i} is out of range for {c} classes"
            )));
        }
    }

    let mut classifier = LinearClassifier {
        weights: Array2::zeros((d, c)),
        biases: Array1::zeros(c),
        class_names: class_names.to_vec(),
    };
    let mut adam = Adam::new(learning_rate, 0.9, 0.999, 1e-8);

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream_for(seed, &[tag::LINEAR, epoch as u64]));
        for batch in order.chunks(batch_size) {
            let b = batch.len();
            let mut x = Array2::<f32>::zeros((b, d));
            for (bi, &i) in batch.iter().enumerate() {
                x.row_mut(bi).assign(&features.row(i));
            }
            let logits = classifier.logits(&x);
            // Softmax residual (p − onehot)/b, stabilized per row.
            let mut grad_logits = Array2::<f32>::zeros((b, c));
            for (bi, &i) in batch.iter().enumerate() {
                let row = logits.row(bi);
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for &v in row {
                    denom += (v - max).exp();
                }
                for (ci, &v) in row.iter().enumerate() {
                    let p = (v - max).exp() / denom;
                    let y = if ci as u32 == labels[i] { 1.0 } else { 0.0 };
                    grad_logits[(bi, ci)] = (p - y) / b as f32;
                }
            }
            let grad_w = x.t().dot(&grad_logits);
            let grad_b = grad_logits.sum_axis(ndarray::Axis(0));
            adam.step(
                &mut [
                    classifier.weights.as_slice_mut().expect("contiguous"),
                    classifier.biases.as_slice_mut().expect("contiguous"),
                ],
                &[
                    grad_w.as_slice().expect("contiguous"),
                    grad_b.as_slice().expect("contiguous"),
                ],
            )?;
        }
    }
    Ok(classifier)
}

/// Extracts features from a labeled training set and fits the linear
/// classifier in one step.
pub fn train_linear_on(
    state: &EncoderState,
    train: &LabeledDataset,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    let features = extract_features(state, &train.images)?;
    train_linear(
        &features,
        &train.labels,
        &train.class_names,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        seed,
    )
}

/// Accuracy and per-class breakdown on a labeled test set. Classes
/// absent from the set report 0.
pub fn evaluate_accuracy(
    classifier: &LinearClassifier,
    state: &EncoderState,
    test: &LabeledDataset,
) -> Result<(f64, Vec<f64>)> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if classifier.n_classes() != test.class_names.len() {
        return Err(Error::invalid(format!(
            "classifier has {} classes, test set {}",
            classifier.n_classes(),
            test.class_names.len()
        )));
    }
    let features = extract_features(state, &test.images)?;
    let predictions = classifier.predict(&features);
    let c = classifier.n_classes();
    let mut correct = vec![0usize; c];
    let mut count = vec![0usize; c];
    let mut hits = 0usize;
    for (&pred, &label) in predictions.iter().zip(&test.labels) {
        count[label as usize] += 1;
        if pred == label {
            correct[label as usize] += 1;
            hits += 1;
        }
    }
    let per_class = (0..c)
        .map(|ci| {
            if count[ci] == 0 {
                0.0
            } else {
                correct[ci] as f64 / count[ci] as f64
            }
        })
        .collect();
    Ok((hits as f64 / test.len() as f64, per_class))
}

/// Fraction of target inputs classified as their attacker-chosen class,
/// one classifier per attack task.
pub fn evaluate_asr(
    classifiers: &[LinearClassifier],
    state: &EncoderState,
    spec: &AttackSpec,
) -> Result<f64> {
    spec.validate()?;
    if classifiers.len() != spec.tasks.len() {
        return Err(Error::invalid(format!(
            "{} classifiers for {} tasks",
            classifiers.len(),
            spec.tasks.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (task, classifier) in spec.tasks.iter().zip(classifiers) {
        let features = extract_features(state, &task.targets)?;
        let predictions = classifier.predict(&features);
        for (i, (&pred, &want)) in predictions.iter().zip(&task.target_classes).enumerate() {
            if want as usize >= classifier.n_classes() {
                return Err(Error::invalid(format!(
                    "target class {want} of target {i} is out of range for {} classes",
                    classifier.n_classes()
                )));
            }
            total += 1;
            if pred == want {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

/// The attacker objective: mean cosine similarity between each target's
/// features and each of its references' features, averaged over every
/// (target, reference) pair.
pub fn outer_objective(state: &EncoderState, spec: &AttackSpec) -> Result<f64> {
    spec.validate()?;
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for task in &spec.tasks {
        let target_features = extract_features(state, &task.targets)?;
        for (i, refs) in task.references.iter().enumerate() {
            let ref_features = extract_features(state, refs)?;
            let t: Vec<f64> = target_features.row(i).iter().map(|&v| f64::from(v)).collect();
            let tnorm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if tnorm == 0.0 || !tnorm.is_finite() {
                return Err(Error::numerical(
                    "outer objective",
                    format!("target {i} features have norm {tnorm}"),
                ));
            }
            for r in ref_features.rows() {
                let rv: Vec<f64> = r.iter().map(|&v| f64::from(v)).collect();
                let rnorm = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if rnorm == 0.0 || !rnorm.is_finite() {
                    return Err(Error::numerical(
                        "outer objective",
                        format!("a reference of target {i} has feature norm {rnorm}"),
                    ));
                }
                let dot: f64 = t.iter().zip(&rv).map(|(a, b)| a * b).sum();
                total += dot / (tnorm * rnorm);
                pairs += 1;
            }
        }
    }
    Ok(total / pairs as f64)
}

/// One trial's metrics. `fpr`/`fnr` are present only when a detection
/// defense ran.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub asr: f64,
    pub ca: f64,
    pub pa: f64,
    pub outer_objective: f64,
    pub per_class_accuracy: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fnr: Option<f64>,
    /// Seeds, configs, and any defense-specific context.
    pub metadata: serde_json::Value,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64, what: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{what} {v} is outside [0,1]")));
            }
            Ok(())
        };
        frac(self.asr, "asr")?;
        frac(self.ca, "ca")?;
        frac(self.pa, "pa")?;
        for (i, &v) in self.per_class_accuracy.iter().enumerate() {
            frac(v, &format!("per_class_accuracy[{i}]"))?;
        }
        if let Some(v) = self.fpr {
            frac(v, "fpr")?;
        }
        if let Some(v) = self.fnr {
            frac(v, "fnr")?;
        }
        if !(-1.0..=1.0).contains(&self.outer_objective) {
            return Err(Error::invalid(format!(
                "outer_objective {} is outside [-1,1]",
                self.outer_objective
            )));
        }
        Ok(())
    }
}
