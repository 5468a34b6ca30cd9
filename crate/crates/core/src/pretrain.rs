//! Contrastive pre-training: losses and the training loop.
//!
//! Two algorithms are supported. The in-batch variant treats the two
//! augmented views of each input as a positive pair and every other view
//! in the batch as a negative; its loss for an ordered pair (i, j) is
//!
//! ```text
//! ℓ(i,j) = −log( exp(sim(u_i,u_j)/τ) / Σ_{k≠i} exp(sim(u_i,u_k)/τ) )
//! ```
//!
//! with cosine similarity over projections, summed over all 2K ordered
//! positive pairs. The momentum variant scores one query against its
//! positive key plus a FIFO dictionary of past keys; keys come from a
//! slowly updated copy of the backbone and receive no gradient.
//!
//! Losses are computed in f64 end to end and gradients are exact; the
//! returned f32 gradients are casts of the f64 result.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{two_views, AugmentConfig};
use crate::data::{ImageTensor, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::model::{
    batch_to_array, enqueue_keys, init, momentum_update, Arch, EncoderState,
};
use crate::nn::Adam;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    SimClr,
    MoCo,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::SimClr => write!(f, "simclr"),
            Algorithm::MoCo => write!(f, "moco"),
        }
    }
}

/// Everything the training loop needs. `seed` drives initialization,
/// shuffling, and view sampling; equal configs give bit-identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub algorithm: Algorithm,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Momentum-encoder interpolation coefficient; unused by simclr.
    pub moco_momentum: f32,
    /// Key dictionary capacity; unused by simclr.
    pub dictionary_capacity: usize,
    pub augment: AugmentConfig,
    pub arch: Arch,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            algorithm: Algorithm::SimClr,
            temperature: 0.5,
            batch_size: 64,
            epochs: 60,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moco_momentum: 0.99,
            dictionary_capacity: 1024,
            augment: AugmentConfig::default(),
            arch: Arch::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Defaults with the temperature conventional for the algorithm:
    /// 0.5 in-batch, 0.2 momentum.
    pub fn default_for(algorithm: Algorithm) -> Self {
        let temperature = match algorithm {
            Algorithm::SimClr => 0.5,
            Algorithm::MoCo => 0.2,
        };
        PretrainConfig {
            algorithm,
            temperature,
            ..PretrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        let min_batch = match self.algorithm {
            Algorithm::SimClr => 2,
            Algorithm::MoCo => 1,
        };
        if self.batch_size < min_batch {
            return Err(Error::invalid(format!(
                "batch_size {} is below the minimum {min_batch} for {}",
                self.batch_size, self.algorithm
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        if self.algorithm == Algorithm::MoCo {
            if !(0.0..=1.0).contains(&self.moco_momentum) {
                return Err(Error::invalid(format!(
                    "moco_momentum must lie in [0,1], got {}",
                    self.moco_momentum
                )));
            }
            if self.dictionary_capacity == 0 {
                return Err(Error::invalid(
                    "dictionary_capacity must be at least 1 for moco",
                ));
            }
        }
        self.augment.validate()?;
        self.arch.validate()
    }
}

/// Normalizes each row into f64, erroring on zero norms.
fn unit_rows_f64(projections: &Array2<f32>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (n, d) = projections.dim();
    let mut rows = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let mut norm_sq = 0.0f64;
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let v = f64::from(projections[(i, j)]);
            norm_sq += v * v;
            row.push(v);
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numerical(
                "cosine similarity",
                format!("projection row {i} has norm {norm}"),
            ));
        }
        for v in &mut row {
            *v /= norm;
        }
        rows.push(row);
        norms.push(norm);
    }
    Ok((rows, norms))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-batch contrastive loss over all ordered positive pairs.
///
/// `pairing` maps each row index to its positive partner and must be a
/// perfect matching (an involution with no fixed point). Returns the raw
/// sum — the quantity gradients descend — and the exact gradient with
/// respect to the unnormalized projections. Report per-view means as
/// `sum / (2K)`.
pub fn simclr_loss(
    projections: &Array2<f32>,
    pairing: &[usize],
    temperature: f64,
) -> Result<(f64, Array2<f32>)> {
    let (n, d) = projections.dim();
    if n < 2 {
        return Err(Error::invalid("need at least one positive pair (2 rows)"));
    }
    if pairing.len() != n {
        return Err(Error::invalid(format!(
            "pairing covers {} rows, projections have {n}",
            pairing.len()
        )));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n || j == i || pairing[j] != i {
            return Err(Error::invalid(format!(
                "pairing is not a perfect matching at row {i}"
            )));
        }
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }

    let (u, norms) = unit_rows_f64(projections)?;
    // Pairwise scaled similarities s[i][k] = u_i·u_k / τ.
    let mut s = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for k in 0..n {
            if k != i {
                s[i][k] = dot(&u[i], &u[k]) / temperature;
            }
        }
    }

    let mut loss = 0.0f64;
    // g[i][k] = ∂L/∂s[i][k], softmax residual per ordered loss term.
    let mut g = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let j = pairing[i];
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i && s[i][k] > max {
                max = s[i][k];
            }
        }
        let mut denom = 0.0f64;
        for k in 0..n {
            if k != i {
                denom += (s[i][k] - max).exp();
            }
        }
        let lse = max + denom.ln();
        loss += lse - s[i][j];
        for k in 0..n {
            if k != i {
                let p = (s[i][k] - lse).exp();
                g[i][k] = (p - if k == j { 1.0 } else { 0.0 }) / temperature;
            }
        }
    }

    // Chain through the similarity matrix (both orientations use u_i),
    // then through row normalization.
    let mut grad = Array2::<f32>::zeros((n, d));
    for i in 0..n {
        let mut gu = vec![0.0f64; d];
        for k in 0..n {
            if k == i {
                continue;
            }
            let w = g[i][k] + g[k][i];
            for (gv, &ukv) in gu.iter_mut().zip(&u[k]) {
                *gv += w * ukv;
            }
        }
        let radial = dot(&gu, &u[i]);
        for j in 0..d {
            grad[(i, j)] = ((gu[j] - radial * u[i][j]) / norms[i]) as f32;
        }
    }
    Ok((loss, grad))
}

/// Momentum-contrast loss for one query against its positive key and a
/// dictionary of negative keys, all treated as constants. Returns the
/// loss and the gradient with respect to the unnormalized query.
pub fn moco_loss(
    query: &[f32],
    positive_key: &[f32],
    dictionary: &[Vec<f32>],
    temperature: f64,
) -> Result<(f64, Vec<f32>)> {
    let d = query.len();
    if d == 0 {
        return Err(Error::invalid("query must be non-empty"));
    }
    if positive_key.len() != d || dictionary.iter().any(|k| k.len() != d) {
        return Err(Error::invalid(
            "query, positive key, and dictionary keys must share one length",
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }

    let normalize = |v: &[f32], what: &str| -> Result<(Vec<f64>, f64)> {
        let mut norm_sq = 0.0f64;
        let mut out = Vec::with_capacity(d);
        for &x in v {
            let x = f64::from(x);
            norm_sq += x * x;
            out.push(x);
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numerical(
                "cosine similarity",
                format!("{what} has norm {norm}"),
            ));
        }
        for x in &mut out {
            *x /= norm;
        }
        Ok((out, norm))
    };

    let (uq, qnorm) = normalize(query, "query")?;
    let mut keys = Vec::with_capacity(dictionary.len() + 1);
    keys.push(normalize(positive_key, "positive key")?.0);
    for (i, k) in dictionary.iter().enumerate() {
        keys.push(normalize(k, &format!("dictionary key {i}"))?.0);
    }

    let sims: Vec<f64> = keys.iter().map(|k| dot(&uq, k) / temperature).collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = sims.iter().map(|&s| (s - max).exp()).sum();
    let lse = max + denom.ln();
    let loss = lse - sims[0];

    let mut gu = vec![0.0f64; d];
    for (j, k) in keys.iter().enumerate() {
        let p = (sims[j] - lse).exp();
        let w = (p - if j == 0 { 1.0 } else { 0.0 }) / temperature;
        for (gv, &kv) in gu.iter_mut().zip(k) {
            *gv += w * kv;
        }
    }
    let radial = dot(&gu, &uq);
    let grad: Vec<f32> = (0..d)
        .map(|j| ((gu[j] - radial * uq[j]) / qnorm) as f32)
        .collect();
    Ok((loss, grad))
}

/// Interleaved pairing for a batch of K inputs rendered as 2K views:
/// rows 2s and 2s+1 are partners.
pub(crate) fn interleaved_pairing(n_views: usize) -> Vec<usize> {
    (0..n_views).map(|i| i ^ 1).collect()
}

/// Per-epoch progress hook: receives (epoch index, mean epoch loss) and
/// returns whether to continue.
pub type EpochCallback<'a> = &'a mut dyn FnMut(usize, f64) -> bool;

/// Pre-trains a fresh encoder on the dataset. Deterministic for a fixed
/// config: initialization, shuffling, and augmentation streams all
/// derive from `cfg.seed`.
pub fn pretrain(
    ds: &UnlabeledDataset,
    cfg: &PretrainConfig,
    callback: Option<EpochCallback>,
) -> Result<EncoderState> {
    cfg.validate()?;
    let mut state = init(&cfg.arch, cfg.seed)?;
    if cfg.algorithm == Algorithm::MoCo {
        state.ensure_momentum();
        state.dictionary.set_capacity(cfg.dictionary_capacity);
    }
    train_loop(&mut state, ds, cfg, cfg.seed, callback)?;
    state.provenance.push(format!(
        "pretrained algorithm={} epochs={} seed={}",
        cfg.algorithm, cfg.epochs, cfg.seed
    ));
    Ok(state)
}

/// Continues training an existing encoder, typically on held-back clean
/// data. Uses a seed stream disjoint from pretraining so the two phases
/// never replay the same draws.
pub fn finetune(
    state: &EncoderState,
    clean: &UnlabeledDataset,
    cfg: &PretrainConfig,
    callback: Option<EpochCallback>,
) -> Result<EncoderState> {
    cfg.validate()?;
    if state.arch != cfg.arch {
        return Err(Error::invalid(
            "finetune config names a different architecture than the encoder",
        ));
    }
    let mut tuned = state.clone();
    if cfg.algorithm == Algorithm::MoCo {
        tuned.ensure_momentum();
        tuned.dictionary.set_capacity(cfg.dictionary_capacity);
    }
    let master = rng::derive_seed(cfg.seed, &[tag::FINETUNE]);
    train_loop(&mut tuned, clean, cfg, master, callback)?;
    tuned.provenance.push(format!(
        "finetuned algorithm={} epochs={} seed={}",
        cfg.algorithm, cfg.epochs, cfg.seed
    ));
    Ok(tuned)
}

/// Shared epoch/batch loop. Draw order is frozen: per epoch one shuffle
/// stream, then per (epoch, batch, slot) one view stream yielding both
/// views. Partial trailing batches are dropped.
fn train_loop(
    state: &mut EncoderState,
    ds: &UnlabeledDataset,
    cfg: &PretrainConfig,
    master: u64,
    mut callback: Option<EpochCallback>,
) -> Result<()> {
    let n = ds.images.len();
    if n < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset holds {n} images, smaller than one batch of {}",
            cfg.batch_size
        )));
    }
    let k = cfg.batch_size;
    let n_batches = n / k;
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream_for(master, &[tag::SHUFFLE, epoch as u64]));

        let mut epoch_loss = 0.0f64;
        for b in 0..n_batches {
            let mut first_views = Vec::with_capacity(k);
            let mut second_views = Vec::with_capacity(k);
            for s in 0..k {
                let idx = order[b * k + s];
                let mut r =
                    rng::stream_for(master, &[tag::VIEWS, epoch as u64, b as u64, s as u64]);
                let (a, bview) = two_views(&ds.images[idx], &cfg.augment, &mut r);
                first_views.push(a);
                second_views.push(bview);
            }
            epoch_loss += match cfg.algorithm {
                Algorithm::SimClr => {
                    simclr_step(state, &mut adam, &first_views, &second_views, cfg)?
                }
                Algorithm::MoCo => {
                    moco_step(state, &mut adam, &first_views, &second_views, cfg)?
                }
            };
        }
        let mean = epoch_loss / n_batches as f64;
        if !mean.is_finite() {
            return Err(Error::numerical(
                "pretrain",
                format!("epoch {epoch} loss is {mean}"),
            ));
        }
        if let Some(cb) = callback.as_mut() {
            if !cb(epoch, mean) {
                state
                    .provenance
                    .push(format!("stopped early after epoch {epoch}"));
                break;
            }
        }
    }
    Ok(())
}

/// One optimizer step on a batch; returns the mean per-view loss.
fn simclr_step(
    state: &mut EncoderState,
    adam: &mut Adam,
    first_views: &[ImageTensor],
    second_views: &[ImageTensor],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let k = first_views.len();
    let mut interleaved = Vec::with_capacity(2 * k);
    for s in 0..k {
        interleaved.push(first_views[s].clone());
        interleaved.push(second_views[s].clone());
    }
    let x = batch_to_array(&interleaved)?;
    let (features, epass) = state.encoder.forward_cached(x);
    let (proj, hpass) = state.head.forward_cached(features);
    let pairing = interleaved_pairing(2 * k);
    let (loss_sum, grad_proj) = simclr_loss(&proj, &pairing, cfg.temperature)?;
    let (grad_features, hgrads) = state.head.backward(&hpass, &grad_proj);
    let egrads = state.encoder.backward(&epass, &grad_features);
    state.apply_gradients(adam, &egrads, &hgrads)?;
    Ok(loss_sum / (2 * k) as f64)
}

/// One momentum-contrast step: queries through the live encoder, keys
/// through the momentum backbone (constants), then update + enqueue.
fn moco_step(
    state: &mut EncoderState,
    adam: &mut Adam,
    first_views: &[ImageTensor],
    second_views: &[ImageTensor],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let k = first_views.len();
    let xq = batch_to_array(first_views)?;
    let xk = batch_to_array(second_views)?;

    let momentum = state
        .momentum_encoder
        .as_ref()
        .ok_or_else(|| Error::invalid("momentum parameters are not initialized"))?;
    let key_features = momentum.forward(&xk);
    let keys = state.head.forward(&key_features);
    let dict_snapshot: Vec<Vec<f32>> = state.dictionary.iter().cloned().collect();

    let (features, epass) = state.encoder.forward_cached(xq);
    let (qproj, hpass) = state.head.forward_cached(features);

    let mut loss_sum = 0.0f64;
    let mut grad_proj = Array2::<f32>::zeros(qproj.dim());
    for s in 0..k {
        let q: Vec<f32> = qproj.row(s).to_vec();
        let pos: Vec<f32> = keys.row(s).to_vec();
        let (loss, grad) = moco_loss(&q, &pos, &dict_snapshot, cfg.temperature)?;
        loss_sum += loss;
        // Mean loss over the batch drives the step.
        for (j, &g) in grad.iter().enumerate() {
            grad_proj[(s, j)] = g / k as f32;
        }
    }
    let (grad_features, hgrads) = state.head.backward(&hpass, &grad_proj);
    let egrads = state.encoder.backward(&epass, &grad_features);
    state.apply_gradients(adam, &egrads, &hgrads)?;

    momentum_update(state, cfg.moco_momentum)?;
    enqueue_keys(state, &keys)?;
    Ok(loss_sum / k as f64)
}
