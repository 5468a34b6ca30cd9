//! Defenses against pre-training poisons.
//!
//! Five countermeasures: duplicate removal followed by K-Means cluster
//! flagging (pre-processing), early stopping / subsample bagging /
//! crop-free augmentation (in-processing), and clean-data fine-tuning
//! (post-processing). Each runs as a pipeline that retrains or adjusts
//! the encoder and emits a metrics report comparable to the undefended
//! run.

use std::collections::HashSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::data::{dedup, ImageTensor, LabeledDataset, Provenance, UnlabeledDataset};
use crate::downstream::{
    evaluate_accuracy, evaluate_asr, outer_objective, train_linear_on, DownstreamConfig,
    LinearClassifier, MetricsReport,
};
use crate::error::{Error, Result};
use crate::model::EncoderState;
use crate::pretrain::{finetune, pretrain, PretrainConfig};
use crate::rng::{self, tag};

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_SHIFT_TOL: f64 = 1e-6;

/// Per-cluster summary. `mean_pairwise_distance` is absent for clusters
/// with fewer than two members, which sort after every finite distance
/// and are therefore flagged last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterStat {
    pub size: usize,
    pub mean_pairwise_distance: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Ascending indices into the inspected dataset.
    pub flagged_indices: Vec<usize>,
    /// Fraction of clean inputs flagged; absent when nothing is clean.
    pub fpr: Option<f64>,
    /// Fraction of poison inputs missed; absent when nothing is poison.
    pub fnr: Option<f64>,
    pub cluster_stats: Vec<ClusterStat>,
}

/// Flags the members of the `n_flagged` most compact clusters of the
/// flattened pixel vectors. Poison images built from few source pairs
/// collapse into near-duplicate clusters, so compactness is the signal.
pub fn kmeans_detect(
    ds: &UnlabeledDataset,
    k_clusters: usize,
    n_flagged: usize,
    seed: u64,
) -> Result<DetectionResult> {
    if k_clusters == 0 {
        return Err(Error::invalid("k_clusters must be at least 1"));
    }
    if k_clusters > ds.len() {
        return Err(Error::invalid(format!(
            "k_clusters {} exceeds dataset size {}",
            k_clusters,
            ds.len()
        )));
    }
    if n_flagged > k_clusters {
        return Err(Error::invalid(format!(
            "n_flagged {n_flagged} exceeds k_clusters {k_clusters}"
        )));
    }

    let points: Vec<Vec<f64>> = ds
        .images
        .iter()
        .map(|img| img.bytes().iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let assignment = lloyd(&points, k_clusters, seed);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_clusters];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }

    let distances: Vec<Option<f64>> = members
        .iter()
        .map(|m| mean_pairwise_distance(&points, m))
        .collect();

    // Flag order: finite distances ascending, then by cluster index;
    // sub-pair clusters (distance absent) come last.
    let mut order: Vec<usize> = (0..k_clusters).collect();
    order.sort_by(|&a, &b| match (distances[a], distances[b]) {
        (Some(da), Some(db)) => da.total_cmp(&db).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    let flagged_clusters: HashSet<usize> = order[..n_flagged].iter().copied().collect();

    let mut flagged_indices: Vec<usize> = flagged_clusters
        .iter()
        .flat_map(|&c| members[c].iter().copied())
        .collect();
    flagged_indices.sort_unstable();

    let cluster_stats = (0..k_clusters)
        .map(|c| ClusterStat {
            size: members[c].len(),
            mean_pairwise_distance: distances[c],
            flagged: flagged_clusters.contains(&c),
        })
        .collect();

    let (fpr, fnr) = compute_fpr_fnr(&flagged_indices, &ds.provenance)?;
    Ok(DetectionResult {
        flagged_indices,
        fpr,
        fnr,
        cluster_stats,
    })
}

/// Lloyd's algorithm with distance-weighted seeding. Returns the
/// cluster index per point. Empty clusters keep their previous centroid.
fn lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream_for(seed, &[tag::KMEANS]);
    let n = points.len();
    let dim = points[0].len();

    // Distance-weighted initialization: first centroid uniform, each
    // subsequent one drawn with probability proportional to squared
    // distance from the nearest chosen centroid.
    use rand::Rng;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut nearest_sq: Vec<f64> = points.iter().map(|p| dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest_sq.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in nearest_sq.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            // All remaining mass is on duplicate positions.
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        let latest = centroids.len() - 1;
        for (i, p) in points.iter().enumerate() {
            let d = dist_sq(p, &centroids[latest]);
            if d < nearest_sq[i] {
                nearest_sq[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist_sq(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut shift = 0.0f64;
            for d in 0..dim {
                let new = sums[c][d] / counts[c] as f64;
                shift += (new - centroids[c][d]).powi(2);
                centroids[c][d] = new;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < KMEANS_SHIFT_TOL {
            break;
        }
    }
    assignment
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_pairwise_distance(points: &[Vec<f64>], members: &[usize]) -> Option<f64> {
    if members.len() < 2 {
        return None;
    }
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            total += dist_sq(&points[i], &points[j]).sqrt();
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Detection error rates with poisons as the positive class:
/// fpr = flagged clean / clean, fnr = missed poison / poison. Either is
/// absent when its denominator is empty.
pub fn compute_fpr_fnr(
    flagged: &[usize],
    provenance: &[Provenance],
) -> Result<(Option<f64>, Option<f64>)> {
    let mut is_flagged = vec![false; provenance.len()];
    for &i in flagged {
        if i >= provenance.len() {
            return Err(Error::invalid(format!(
                "flagged index {i} exceeds dataset size {}",
                provenance.len()
            )));
        }
        is_flagged[i] = true;
    }
    let mut clean = 0usize;
    let mut clean_flagged = 0usize;
    let mut poison = 0usize;
    let mut poison_missed = 0usize;
    for (i, &p) in provenance.iter().enumerate() {
        match p {
            Provenance::Clean => {
                clean += 1;
                if is_flagged[i] {
                    clean_flagged += 1;
                }
            }
            Provenance::Poison => {
                poison += 1;
                if !is_flagged[i] {
                    poison_missed += 1;
                }
            }
        }
    }
    let fpr = (clean > 0).then(|| clean_flagged as f64 / clean as f64);
    let fnr = (poison > 0).then(|| poison_missed as f64 / poison as f64);
    Ok((fpr, fnr))
}

/// Majority-vote ensemble over encoders pre-trained on independent
/// subsamples.
#[derive(Debug, Clone)]
pub struct BaggingEnsemble {
    pub base_states: Vec<EncoderState>,
    pub base_classifiers: Vec<LinearClassifier>,
    pub subsample_indices: Vec<Vec<usize>>,
}

impl BaggingEnsemble {
    pub fn len(&self) -> usize {
        self.base_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_states.is_empty() {
            return Err(Error::invalid("ensemble has no base encoders"));
        }
        if self.base_classifiers.len() != self.base_states.len()
            || self.subsample_indices.len() != self.base_states.len()
        {
            return Err(Error::invalid(format!(
                "ensemble parts disagree: {} states, {} classifiers, {} subsamples",
                self.base_states.len(),
                self.base_classifiers.len(),
                self.subsample_indices.len()
            )));
        }
        let c = self.base_classifiers[0].n_classes();
        if self.base_classifiers.iter().any(|clf| clf.n_classes() != c) {
            return Err(Error::invalid("base classifiers disagree on class count"));
        }
        Ok(())
    }
}

/// Trains the bagging ensemble: each base draws its subsample without
/// replacement from an independent derived stream, pre-trains a fresh
/// encoder, and fits a linear classifier on the downstream data.
pub fn bagging_train(
    ds: &UnlabeledDataset,
    n_subsamples: usize,
    subsample_size: usize,
    pre_cfg: &PretrainConfig,
    downstream: &LabeledDataset,
    down_cfg: &DownstreamConfig,
    seed: u64,
) -> Result<BaggingEnsemble> {
    if n_subsamples == 0 {
        return Err(Error::invalid("n_subsamples must be at least 1"));
    }
    if subsample_size > ds.len() {
        return Err(Error::invalid(format!(
            "subsample_size {} exceeds dataset size {}",
            subsample_size,
            ds.len()
        )));
    }
    let mut base_states = Vec::with_capacity(n_subsamples);
    let mut base_classifiers = Vec::with_capacity(n_subsamples);
    let mut subsample_indices = Vec::with_capacity(n_subsamples);
    for i in 0..n_subsamples {
        let i64tag = i as u64;
        let mut draw = rng::stream_for(seed, &[tag::BAGGING, i64tag, 0]);
        let mut indices =
            rand::seq::index::sample(&mut draw, ds.len(), subsample_size).into_vec();
        indices.sort_unstable();
        let images: Vec<ImageTensor> = indices.iter().map(|&j| ds.images[j].clone()).collect();
        let provenance: Vec<Provenance> = indices.iter().map(|&j| ds.provenance[j]).collect();
        let subsample = UnlabeledDataset::new(images, provenance)?;

        let mut cfg = pre_cfg.clone();
        cfg.seed = rng::derive_seed(seed, &[tag::BAGGING, i64tag, 1]);
        let state = pretrain(&subsample, &cfg, None)?;
        let classifier = train_linear_on(
            &state,
            downstream,
            down_cfg,
            rng::derive_seed(seed, &[tag::BAGGING, i64tag, 2]),
        )?;
        base_states.push(state);
        base_classifiers.push(classifier);
        subsample_indices.push(indices);
    }
    Ok(BaggingEnsemble {
        base_states,
        base_classifiers,
        subsample_indices,
    })
}

/// Plurality vote over the base classifiers, one prediction per image.
/// Ties break to the smallest class index, matching the single-encoder
/// argmax rule; the result is invariant to base ordering.
pub fn bagging_predict(ensemble: &BaggingEnsemble, images: &[ImageTensor]) -> Result<Vec<u32>> {
    ensemble.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("no images to predict"));
    }
    let c = ensemble.base_classifiers[0].n_classes();
    let mut votes = vec![vec![0usize; c]; images.len()];
    for (state, classifier) in ensemble.base_states.iter().zip(&ensemble.base_classifiers) {
        let features = crate::downstream::extract_features(state, images)?;
        for (i, pred) in classifier.predict(&features).into_iter().enumerate() {
            votes[i][pred as usize] += 1;
        }
    }
    Ok(votes
        .into_iter()
        .map(|tally| {
            let mut best = 0usize;
            for (class, &n) in tally.iter().enumerate() {
                if n > tally[best] {
                    best = class;
                }
            }
            best as u32
        })
        .collect())
}

/// Ensemble accuracy and per-class breakdown on a labeled test set.
pub fn bagging_accuracy(
    ensemble: &BaggingEnsemble,
    test: &LabeledDataset,
) -> Result<(f64, Vec<f64>)> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let c = test.class_names.len();
    if ensemble.base_classifiers.first().map(|clf| clf.n_classes()) != Some(c) {
        return Err(Error::invalid("ensemble class count differs from test set"));
    }
    let predictions = bagging_predict(ensemble, &test.images)?;
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

/// Fraction of attack targets the ensemble assigns to the attacker's
/// chosen class.
pub fn bagging_asr(ensemble: &BaggingEnsemble, spec: &AttackSpec) -> Result<f64> {
    spec.validate()?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for task in &spec.tasks {
        let predictions = bagging_predict(ensemble, &task.targets)?;
        for (&pred, &want) in predictions.iter().zip(&task.target_classes) {
            total += 1;
            if pred == want {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    DedupKmeans,
    EarlyStop,
    Bagging,
    NoCrop,
    Finetune,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 5] = [
        DefenseKind::DedupKmeans,
        DefenseKind::EarlyStop,
        DefenseKind::Bagging,
        DefenseKind::NoCrop,
        DefenseKind::Finetune,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::DedupKmeans => "dedup_kmeans",
            DefenseKind::EarlyStop => "early_stop",
            DefenseKind::Bagging => "bagging",
            DefenseKind::NoCrop => "no_crop",
            DefenseKind::Finetune => "finetune",
        }
    }
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefenseKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown defense {s:?}; expected one of dedup_kmeans, early_stop, bagging, no_crop, finetune"
                ))
            })
    }
}

/// Tunable knobs shared by the defense pipelines.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseParams {
    pub kmeans_clusters: usize,
    pub kmeans_flagged: usize,
    pub early_stop_epochs: usize,
    pub bagging_subsamples: usize,
    pub bagging_subsample_size: usize,
    pub finetune_clean_fraction: f64,
    pub finetune_learning_rate: f32,
}

impl Default for DefenseParams {
    fn default() -> Self {
        DefenseParams {
            kmeans_clusters: 20,
            kmeans_flagged: 4,
            early_stop_epochs: 15,
            bagging_subsamples: 9,
            bagging_subsample_size: 500,
            finetune_clean_fraction: 0.5,
            finetune_learning_rate: 1e-4,
        }
    }
}

impl DefenseParams {
    pub fn validate(&self) -> Result<()> {
        if self.kmeans_clusters == 0 {
            return Err(Error::invalid("kmeans_clusters must be at least 1"));
        }
        if self.kmeans_flagged > self.kmeans_clusters {
            return Err(Error::invalid(format!(
                "kmeans_flagged {} exceeds kmeans_clusters {}",
                self.kmeans_flagged, self.kmeans_clusters
            )));
        }
        if self.bagging_subsamples == 0 {
            return Err(Error::invalid("bagging_subsamples must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.finetune_clean_fraction) {
            return Err(Error::invalid(format!(
                "finetune_clean_fraction {} is outside [0,1]",
                self.finetune_clean_fraction
            )));
        }
        if !(self.finetune_learning_rate > 0.0 && self.finetune_learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "finetune_learning_rate must be positive, got {}",
                self.finetune_learning_rate
            )));
        }
        Ok(())
    }
}

/// Everything a defense pipeline needs: the (possibly poisoned)
/// pre-training pool, held-back clean data for fine-tuning, downstream
/// train/test splits, the attack description for ASR/objective metrics,
/// and the baseline configs. `clean_accuracy` is the reference CA the
/// caller measured on a clean encoder; it is carried into each report.
#[derive(Debug, Clone, Copy)]
pub struct DefenseContext<'a> {
    pub poisoned: &'a UnlabeledDataset,
    pub clean: &'a UnlabeledDataset,
    pub downstream_train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub spec: &'a AttackSpec,
    pub pretrain: &'a PretrainConfig,
    pub downstream: &'a DownstreamConfig,
    pub params: &'a DefenseParams,
    pub clean_accuracy: f64,
}

/// The no-defense baseline: pre-train on the poisoned pool and evaluate.
/// Defenses that change nothing (early stop at the full epoch budget,
/// fine-tuning on a zero fraction) reproduce this report exactly.
pub fn run_undefended(ctx: &DefenseContext, seed: u64) -> Result<MetricsReport> {
    let mut cfg = ctx.pretrain.clone();
    cfg.seed = rng::derive_seed(seed, &[tag::DEFENSE]);
    let state = pretrain(ctx.poisoned, &cfg, None)?;
    let metadata = serde_json::json!({
        "defense": "none",
        "seed": seed,
        "pretrain": serde_json::to_value(&cfg).expect("config serializes"),
    });
    evaluate_defended(&state, ctx, seed, metadata)
}

/// Runs one named defense end to end and reports the post-defense
/// metrics.
pub fn run_defense_pipeline(
    kind: DefenseKind,
    ctx: &DefenseContext,
    seed: u64,
) -> Result<MetricsReport> {
    ctx.params.validate()?;
    let mut cfg = ctx.pretrain.clone();
    cfg.seed = rng::derive_seed(seed, &[tag::DEFENSE]);
    match kind {
        DefenseKind::DedupKmeans => {
            let (survivors, removed) = dedup(ctx.poisoned);
            let detection = kmeans_detect(
                &survivors,
                ctx.params.kmeans_clusters,
                ctx.params.kmeans_flagged,
                seed,
            )?;
            let flagged: HashSet<usize> = detection.flagged_indices.iter().copied().collect();
            let mut images = Vec::new();
            let mut provenance = Vec::new();
            for i in 0..survivors.len() {
                if !flagged.contains(&i) {
                    images.push(survivors.images[i].clone());
                    provenance.push(survivors.provenance[i]);
                }
            }
            let remaining = UnlabeledDataset::new(images, provenance)?;
            let state = pretrain(&remaining, &cfg, None)?;
            let metadata = serde_json::json!({
                "defense": kind.name(),
                "seed": seed,
                "pretrain": serde_json::to_value(&cfg).expect("config serializes"),
                "duplicates_removed": removed.len(),
                "detection_flagged": detection.flagged_indices.len(),
                "remaining": remaining.len(),
                "kmeans_clusters": ctx.params.kmeans_clusters,
                "kmeans_flagged": ctx.params.kmeans_flagged,
            });
            let mut report = evaluate_defended(&state, ctx, seed, metadata)?;
            // Detection rates are measured post-dedup, against the
            // surviving indices.
            report.fpr = detection.fpr;
            report.fnr = detection.fnr;
            Ok(report)
        }
        DefenseKind::EarlyStop => {
            cfg.epochs = ctx.params.early_stop_epochs;
            let state = pretrain(ctx.poisoned, &cfg, None)?;
            let metadata = serde_json::json!({
                "defense": kind.name(),
                "seed": seed,
                "pretrain": serde_json::to_value(&cfg).expect("config serializes"),
            });
            evaluate_defended(&state, ctx, seed, metadata)
        }
        DefenseKind::Bagging => {
            let ensemble = bagging_train(
                ctx.poisoned,
                ctx.params.bagging_subsamples,
                ctx.params.bagging_subsample_size,
                &cfg,
                ctx.downstream_train,
                ctx.downstream,
                seed,
            )?;
            let (pa, per_class) = bagging_accuracy(&ensemble, ctx.test)?;
            let asr = bagging_asr(&ensemble, ctx.spec)?;
            // No single defended encoder exists; the objective is the
            // mean over base encoders.
            let mut outer = 0.0f64;
            for state in &ensemble.base_states {
                outer += outer_objective(state, ctx.spec)?;
            }
            outer /= ensemble.len() as f64;
            let report = MetricsReport {
                asr,
                ca: ctx.clean_accuracy,
                pa,
                outer_objective: outer,
                per_class_accuracy: per_class,
                fpr: None,
                fnr: None,
                metadata: serde_json::json!({
                    "defense": kind.name(),
                    "seed": seed,
                    "pretrain": serde_json::to_value(&cfg).expect("config serializes"),
                    "n_subsamples": ctx.params.bagging_subsamples,
                    "subsample_size": ctx.params.bagging_subsample_size,
                }),
            };
            report.validate()?;
            Ok(report)
        }
        DefenseKind::NoCrop => {
            cfg.augment.enable_crop = false;
            let state = pretrain(ctx.poisoned, &cfg, None)?;
            let metadata = serde_json::json!({
                "defense": kind.name(),
                "seed": seed,
                "pretrain": serde_json::to_value(&cfg).expect("config serializes"),
            });
            evaluate_defended(&state, ctx, seed, metadata)
        }
        DefenseKind::Finetune => {
            let state = pretrain(ctx.poisoned, &cfg, None)?;
            let n_clean =
                (ctx.params.finetune_clean_fraction * ctx.clean.len() as f64).floor() as usize;
            let (state, finetuned) = if n_clean == 0 {
                (state, false)
            } else {
                let mut draw = rng::stream_for(seed, &[tag::DEFENSE, 1]);
                let mut indices =
                    rand::seq::index::sample(&mut draw, ctx.clean.len(), n_clean).into_vec();
                indices.sort_unstable();
                let images: Vec<ImageTensor> =
                    indices.iter().map(|&j| ctx.clean.images[j].clone()).collect();
                let provenance: Vec<Provenance> =
                    indices.iter().map(|&j| ctx.clean.provenance[j]).collect();
                let subset = UnlabeledDataset::new(images, provenance)?;
                let mut ft_cfg = cfg.clone();
                ft_cfg.learning_rate = ctx.params.finetune_learning_rate;
                (finetune(&state, &subset, &ft_cfg, None)?, true)
            };
            let metadata = serde_json::json!({
                "defense": kind.name(),
                "seed": seed,
                "pretrain": serde_json::to_value(&cfg).expect("config serializes"),
                "clean_fraction": ctx.params.finetune_clean_fraction,
                "clean_images_used": n_clean,
                "finetuned": finetuned,
                "finetune_learning_rate": ctx.params.finetune_learning_rate,
            });
            evaluate_defended(&state, ctx, seed, metadata)
        }
    }
}

/// Shared tail of the single-encoder pipelines: linear evaluation, ASR,
/// and the attacker objective on the defended encoder.
fn evaluate_defended(
    state: &EncoderState,
    ctx: &DefenseContext,
    seed: u64,
    metadata: serde_json::Value,
) -> Result<MetricsReport> {
    let classifier = train_linear_on(
        state,
        ctx.downstream_train,
        ctx.downstream,
        rng::derive_seed(seed, &[tag::LINEAR]),
    )?;
    let (pa, per_class) = evaluate_accuracy(&classifier, state, ctx.test)?;
    let classifiers = vec![classifier; ctx.spec.tasks.len()];
    let asr = evaluate_asr(&classifiers, state, ctx.spec)?;
    let outer = outer_objective(state, ctx.spec)?;
    let report = MetricsReport {
        asr,
        ca: ctx.clean_accuracy,
        pa,
        outer_objective: outer,
        per_class_accuracy: per_class,
        fpr: None,
        fnr: None,
        metadata,
    };
    report.validate()?;
    Ok(report)
}
