//! Encoder, projection head, and parameter lifecycle.
//!
//! The desk-scale encoder is a configurable stack of conv(3x3, stride
//! 2) → group-norm → ReLU blocks followed by global average pooling and
//! a fully connected feature layer. A two-layer perceptron projection
//! head maps features to the contrastive space. [`EncoderState`] bundles
//! both with the optional momentum copy of the backbone and the FIFO key
//! dictionary used by momentum-contrast training.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{
    gap_backward, gap_forward, relu2_backward, relu2_forward, relu4_backward, relu4_forward,
    Adam, Conv2d, ConvCache, GroupNorm, GroupNormCache, Linear,
};
use crate::rng::{self, tag};

/// Architecture descriptor. Every conv block is 3x3 with stride 2 and
/// padding 1, so each block halves the spatial extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arch {
    pub input_channels: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    /// Group count for every normalization layer.
    pub groups: usize,
    pub feature_dim: usize,
    /// Hidden width of the projection head.
    pub head_width: usize,
    pub proj_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            input_channels: 3,
            widths: vec![32, 64, 128],
            groups: 8,
            feature_dim: 128,
            head_width: 128,
            proj_dim: 64,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::invalid(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.widths.is_empty() {
            return Err(Error::invalid("widths must name at least one conv block"));
        }
        for &w in &self.widths {
            if w == 0 || w % self.groups != 0 {
                return Err(Error::invalid(format!(
                    "block width {w} must be a positive multiple of groups {}",
                    self.groups
                )));
            }
        }
        if self.groups == 0 {
            return Err(Error::invalid("groups must be at least 1"));
        }
        if self.feature_dim == 0 || self.head_width == 0 || self.proj_dim == 0 {
            return Err(Error::invalid(
                "feature_dim, head_width, and proj_dim must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub(crate) conv: Conv2d,
    pub(crate) norm: GroupNorm,
}

/// Backbone f: conv blocks, global average pool, feature layer.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub(crate) blocks: Vec<ConvBlock>,
    pub(crate) feat: Linear,
}

/// Projection head h: two fully connected layers with a ReLU between.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub(crate) l1: Linear,
    pub(crate) l2: Linear,
}

/// FIFO queue of key vectors for momentum-contrast training. Capacity 0
/// means "not configured": enqueued keys are discarded (training configs
/// reject that state up front).
#[derive(Debug, Clone, Default)]
pub struct KeyDictionary {
    keys: VecDeque<Vec<f32>>,
    capacity: usize,
}

impl KeyDictionary {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity;
        while self.keys.len() > capacity {
            self.keys.pop_front();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.keys.iter()
    }

    pub(crate) fn push(&mut self, key: Vec<f32>) {
        self.keys.push_back(key);
        while self.keys.len() > self.capacity {
            self.keys.pop_front();
        }
    }
}

/// Complete trainable state: backbone θ, head h, optional momentum copy
/// of the backbone, and the key dictionary. `provenance` records how the
/// state came to be (init, pretrain, finetune) for reports.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub arch: Arch,
    pub encoder: Encoder,
    pub head: ProjectionHead,
    pub momentum_encoder: Option<Encoder>,
    pub dictionary: KeyDictionary,
    pub provenance: Vec<String>,
}

/// Deterministic initialization: every weight is fan-in scaled uniform
/// U(−1/√fan_in, 1/√fan_in) drawn in a fixed order from one stream;
/// biases start at zero, norm scales at one. The dictionary starts empty
/// and no momentum copy exists.
pub fn init(arch: &Arch, seed: u64) -> Result<EncoderState> {
    arch.validate()?;
    let mut r = rng::stream_for(seed, &[tag::INIT]);
    let mut fill = |w: &mut Array2<f32>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f32).sqrt();
        for v in w.iter_mut() {
            *v = r.random_range(-bound..=bound);
        }
    };

    let mut blocks = Vec::with_capacity(arch.widths.len());
    let mut in_ch = arch.input_channels;
    for &out_ch in &arch.widths {
        let mut conv = Conv2d::new(in_ch, out_ch, 3, 2, 1)?;
        fill(&mut conv.weight, in_ch * 9);
        let norm = GroupNorm::new(out_ch, arch.groups)?;
        blocks.push(ConvBlock { conv, norm });
        in_ch = out_ch;
    }
    let mut feat = Linear::new(in_ch, arch.feature_dim);
    fill(&mut feat.weight, in_ch);
    let mut l1 = Linear::new(arch.feature_dim, arch.head_width);
    fill(&mut l1.weight, arch.feature_dim);
    let mut l2 = Linear::new(arch.head_width, arch.proj_dim);
    fill(&mut l2.weight, arch.head_width);

    Ok(EncoderState {
        arch: arch.clone(),
        encoder: Encoder { blocks, feat },
        head: ProjectionHead { l1, l2 },
        momentum_encoder: None,
        dictionary: KeyDictionary::default(),
        provenance: vec![format!("initialized seed={seed}")],
    })
}

/// Converts a uniform batch of images to [B, C, H, W].
pub(crate) fn batch_to_array(batch: &[ImageTensor]) -> Result<Array4<f32>> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("batch must be nonempty"))?;
    let (h, w, c) = first.shape();
    for (i, img) in batch.iter().enumerate() {
        if img.shape() != (h, w, c) {
            return Err(Error::invalid(format!(
                "image {i} has shape {:?}, expected {:?}",
                img.shape(),
                (h, w, c)
            )));
        }
    }
    let mut x = Array4::<f32>::zeros((batch.len(), c, h, w));
    for (bi, img) in batch.iter().enumerate() {
        for y in 0..h {
            for xx in 0..w {
                for ci in 0..c {
                    x[(bi, ci, y, xx)] = img.get(y, xx, ci);
                }
            }
        }
    }
    Ok(x)
}

/// Caches from a training-mode encoder pass, consumed by backward.
pub(crate) struct EncoderPass {
    input: Array4<f32>,
    conv_caches: Vec<ConvCache>,
    norm_caches: Vec<GroupNormCache>,
    relu_outs: Vec<Array4<f32>>,
    gap_h: usize,
    gap_w: usize,
    feat_in: Array2<f32>,
}

/// Parameter gradients for the backbone, ordered like
/// [`Encoder::params_mut`].
pub(crate) struct EncoderGrads {
    pub blocks: Vec<(Array2<f32>, Array1<f32>, Array1<f32>)>,
    pub feat_w: Array2<f32>,
    pub feat_b: Array1<f32>,
}

impl Encoder {
    /// Inference pass; no caches retained.
    pub(crate) fn forward(&self, x: &Array4<f32>) -> Array2<f32> {
        let mut cur = x.clone();
        for block in &self.blocks {
            let (conv_out, _) = block.conv.forward(&cur);
            let (norm_out, _) = block.norm.forward(&conv_out);
            cur = relu4_forward(&norm_out);
        }
        let pooled = gap_forward(&cur);
        self.feat.forward(&pooled)
    }

    pub(crate) fn forward_cached(&self, x: Array4<f32>) -> (Array2<f32>, EncoderPass) {
        let mut conv_caches = Vec::with_capacity(self.blocks.len());
        let mut norm_caches = Vec::with_capacity(self.blocks.len());
        let mut relu_outs = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            let (conv_out, cc) = block.conv.forward(&cur);
            let (norm_out, nc) = block.norm.forward(&conv_out);
            cur = relu4_forward(&norm_out);
            conv_caches.push(cc);
            norm_caches.push(nc);
            relu_outs.push(cur.clone());
        }
        let (_, _, gh, gw) = cur.dim();
        let pooled = gap_forward(&cur);
        let features = self.feat.forward(&pooled);
        (
            features,
            EncoderPass {
                input: x,
                conv_caches,
                norm_caches,
                relu_outs,
                gap_h: gh,
                gap_w: gw,
                feat_in: pooled,
            },
        )
    }

    /// Backpropagates feature gradients to all backbone parameters.
    pub(crate) fn backward(&self, pass: &EncoderPass, grad_features: &Array2<f32>) -> EncoderGrads {
        let (grad_pooled, feat_w, feat_b) = self.feat.backward(&pass.feat_in, grad_features);
        let mut grad = gap_backward(&grad_pooled, pass.gap_h, pass.gap_w);
        let mut blocks: Vec<(Array2<f32>, Array1<f32>, Array1<f32>)> =
            Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let masked = relu4_backward(&pass.relu_outs[i], &grad);
            let (grad_conv_out, g_gamma, g_beta) =
                block.norm.backward(&pass.norm_caches[i], &masked);
            let (grad_in, g_w) = block.conv.backward(&pass.conv_caches[i], &grad_conv_out);
            blocks.push((g_w, g_gamma, g_beta));
            grad = grad_in;
        }
        blocks.reverse();
        let _ = &pass.input;
        EncoderGrads {
            blocks,
            feat_w,
            feat_b,
        }
    }

    /// Mutable views over all parameters in the frozen order: per block
    /// conv weight, norm gamma, norm beta; then feature weight and bias.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(block.conv.weight.as_slice_mut().expect("contiguous"));
            out.push(block.norm.gamma.as_slice_mut().expect("contiguous"));
            out.push(block.norm.beta.as_slice_mut().expect("contiguous"));
        }
        out.push(self.feat.weight.as_slice_mut().expect("contiguous"));
        out.push(self.feat.bias.as_slice_mut().expect("contiguous"));
        out
    }

    pub(crate) fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(block.conv.weight.as_slice().expect("contiguous"));
            out.push(block.norm.gamma.as_slice().expect("contiguous"));
            out.push(block.norm.beta.as_slice().expect("contiguous"));
        }
        out.push(self.feat.weight.as_slice().expect("contiguous"));
        out.push(self.feat.bias.as_slice().expect("contiguous"));
        out
    }
}

impl EncoderGrads {
    /// Gradient views in the same order as [`Encoder::params_mut`].
    pub(crate) fn views(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (w, g, b) in &self.blocks {
            out.push(w.as_slice().expect("contiguous"));
            out.push(g.as_slice().expect("contiguous"));
            out.push(b.as_slice().expect("contiguous"));
        }
        out.push(self.feat_w.as_slice().expect("contiguous"));
        out.push(self.feat_b.as_slice().expect("contiguous"));
        out
    }
}

pub(crate) struct HeadPass {
    input: Array2<f32>,
    relu_out: Array2<f32>,
}

pub(crate) struct HeadGrads {
    pub l1_w: Array2<f32>,
    pub l1_b: Array1<f32>,
    pub l2_w: Array2<f32>,
    pub l2_b: Array1<f32>,
}

impl ProjectionHead {
    pub(crate) fn forward(&self, features: &Array2<f32>) -> Array2<f32> {
        let hidden = relu2_forward(&self.l1.forward(features));
        self.l2.forward(&hidden)
    }

    pub(crate) fn forward_cached(&self, features: Array2<f32>) -> (Array2<f32>, HeadPass) {
        let relu_out = relu2_forward(&self.l1.forward(&features));
        let proj = self.l2.forward(&relu_out);
        (
            proj,
            HeadPass {
                input: features,
                relu_out,
            },
        )
    }

    /// Returns (grad wrt features, parameter grads).
    pub(crate) fn backward(
        &self,
        pass: &HeadPass,
        grad_proj: &Array2<f32>,
    ) -> (Array2<f32>, HeadGrads) {
        let (grad_hidden, l2_w, l2_b) = self.l2.backward(&pass.relu_out, grad_proj);
        let masked = relu2_backward(&pass.relu_out, &grad_hidden);
        let (grad_features, l1_w, l1_b) = self.l1.backward(&pass.input, &masked);
        (
            grad_features,
            HeadGrads {
                l1_w,
                l1_b,
                l2_w,
                l2_b,
            },
        )
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.l1.weight.as_slice_mut().expect("contiguous"),
            self.l1.bias.as_slice_mut().expect("contiguous"),
            self.l2.weight.as_slice_mut().expect("contiguous"),
            self.l2.bias.as_slice_mut().expect("contiguous"),
        ]
    }
}

impl HeadGrads {
    pub(crate) fn views(&self) -> Vec<&[f32]> {
        vec![
            self.l1_w.as_slice().expect("contiguous"),
            self.l1_b.as_slice().expect("contiguous"),
            self.l2_w.as_slice().expect("contiguous"),
            self.l2_b.as_slice().expect("contiguous"),
        ]
    }
}

impl EncoderState {
    /// Creates the momentum copy as an exact snapshot of the current
    /// backbone if it does not exist yet.
    pub fn ensure_momentum(&mut self) {
        if self.momentum_encoder.is_none() {
            self.momentum_encoder = Some(self.encoder.clone());
        }
    }

    /// One optimizer step over backbone and head with the given
    /// gradients.
    pub(crate) fn apply_gradients(
        &mut self,
        adam: &mut Adam,
        enc_grads: &EncoderGrads,
        head_grads: &HeadGrads,
    ) -> Result<()> {
        let mut params = self.encoder.params_mut();
        params.extend(self.head.params_mut());
        let mut grads = enc_grads.views();
        grads.extend(head_grads.views());
        adam.step(&mut params, &grads)
    }
}

/// Feature vectors f(x) for a batch of images: [B, feature_dim].
pub fn forward_features(state: &EncoderState, batch: &[ImageTensor]) -> Result<Array2<f32>> {
    let x = batch_to_array(batch)?;
    if x.dim().1 != state.arch.input_channels {
        return Err(Error::invalid(format!(
            "batch has {} channels but the encoder expects {}",
            x.dim().1,
            state.arch.input_channels
        )));
    }
    Ok(state.encoder.forward(&x))
}

/// Projections h(f(x)) for a batch: [B, proj_dim].
pub fn forward_projection(state: &EncoderState, batch: &[ImageTensor]) -> Result<Array2<f32>> {
    let features = forward_features(state, batch)?;
    Ok(state.head.forward(&features))
}

/// Momentum update f_m ← m·f_m + (1−m)·f_q over every backbone
/// parameter.
pub fn momentum_update(state: &mut EncoderState, m: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!(
            "momentum coefficient must lie in [0,1], got {m}"
        )));
    }
    let momentum = state
        .momentum_encoder
        .as_mut()
        .ok_or_else(|| Error::invalid("momentum parameters are not initialized"))?;
    let query: Vec<&[f32]> = {
        // Collect immutable views of the live backbone first.
        let mut views = Vec::new();
        for block in &state.encoder.blocks {
            views.push(block.conv.weight.as_slice().expect("contiguous"));
            views.push(block.norm.gamma.as_slice().expect("contiguous"));
            views.push(block.norm.beta.as_slice().expect("contiguous"));
        }
        views.push(state.encoder.feat.weight.as_slice().expect("contiguous"));
        views.push(state.encoder.feat.bias.as_slice().expect("contiguous"));
        views
    };
    let mut targets = momentum.params_mut();
    debug_assert_eq!(query.len(), targets.len());
    for (t, q) in targets.iter_mut().zip(query) {
        for (tv, &qv) in t.iter_mut().zip(q) {
            *tv = m * *tv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// Appends key vectors (rows of `keys`) to the FIFO dictionary, evicting
/// the oldest entries beyond capacity.
pub fn enqueue_keys(state: &mut EncoderState, keys: &Array2<f32>) -> Result<()> {
    if keys.dim().1 != state.arch.proj_dim {
        return Err(Error::invalid(format!(
            "keys have length {} but proj_dim is {}",
            keys.dim().1,
            state.arch.proj_dim
        )));
    }
    for row in keys.rows() {
        state.dictionary.push(row.to_vec());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny_arch() -> Arch {
        Arch {
            input_channels: 3,
            widths: vec![8, 16],
            groups: 4,
            feature_dim: 12,
            head_width: 10,
            proj_dim: 6,
        }
    }

    fn sample_batch(n: usize) -> Vec<ImageTensor> {
        generate_synthetic(n, 2, 16, 3).unwrap().images[..n].to_vec()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = tiny_arch();
        let a = init(&arch, 7).unwrap();
        let b = init(&arch, 7).unwrap();
        let c = init(&arch, 8).unwrap();
        assert_eq!(a.encoder.params(), b.encoder.params());
        assert_ne!(a.encoder.params(), c.encoder.params());
        assert!(a.dictionary.is_empty());
        assert!(a.momentum_encoder.is_none());
    }

    #[test]
    fn default_arch_forward_has_contract_shapes() {
        let arch = Arch::default();
        let state = init(&arch, 0).unwrap();
        let batch = generate_synthetic(2, 2, 32, 1).unwrap().images;
        let feats = forward_features(&state, &batch).unwrap();
        assert_eq!(feats.dim(), (4, 128));
        let proj = forward_projection(&state, &batch).unwrap();
        assert_eq!(proj.dim(), (4, 64));
        assert!(feats.iter().all(|v| v.is_finite()));
        assert!(proj.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn singleton_batch_equals_its_row_in_a_larger_batch() {
        let state = init(&tiny_arch(), 5).unwrap();
        let batch = sample_batch(3);
        let full = forward_features(&state, &batch).unwrap();
        let single = forward_features(&state, &batch[1..2]).unwrap();
        for d in 0..12 {
            let diff = (full[(1, d)] - single[(0, d)]).abs();
            assert!(diff < 1e-5, "feature {d} differs by {diff}");
        }
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let state = init(&tiny_arch(), 5).unwrap();
        let img = sample_batch(1).remove(0);
        let feats = forward_features(&state, &[img.clone(), img]).unwrap();
        for d in 0..12 {
            assert_eq!(feats[(0, d)], feats[(1, d)]);
        }
    }

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let arch = tiny_arch();
        let mut state = init(&arch, 1).unwrap();
        for p in state.encoder.params_mut() {
            p.fill(0.0);
        }
        for p in state.head.params_mut() {
            p.fill(0.0);
        }
        let feats = forward_features(&state, &sample_batch(2)).unwrap();
        assert!(feats.iter().all(|&v| v == 0.0));
        let proj = forward_projection(&state, &sample_batch(2)).unwrap();
        assert!(proj.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let state = init(&tiny_arch(), 2).unwrap();
        let batch = sample_batch(2);
        let a = forward_features(&state, &batch).unwrap();
        let b = forward_features(&state, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_update_interpolates() {
        let mut state = init(&tiny_arch(), 3).unwrap();
        assert!(momentum_update(&mut state, 0.5).is_err());
        state.ensure_momentum();

        // m=1 leaves the copy untouched.
        let before: Vec<Vec<f32>> = state
            .momentum_encoder
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .map(|s| s.to_vec())
            .collect();
        // Perturb the live encoder.
        for p in state.encoder.params_mut() {
            for v in p.iter_mut() {
                *v += 1.0;
            }
        }
        momentum_update(&mut state, 1.0).unwrap();
        let after: Vec<Vec<f32>> = state
            .momentum_encoder
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .map(|s| s.to_vec())
            .collect();
        assert_eq!(before, after);

        // m=0 copies the live encoder exactly.
        momentum_update(&mut state, 0.0).unwrap();
        let live: Vec<Vec<f32>> = state
            .encoder
            .params()
            .iter()
            .map(|s| s.to_vec())
            .collect();
        let copied: Vec<Vec<f32>> = state
            .momentum_encoder
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .map(|s| s.to_vec())
            .collect();
        assert_eq!(live, copied);
    }

    #[test]
    fn momentum_scalar_arithmetic() {
        // f_m = 1, f_q = 0, m = 0.99 → 0.99 on every coordinate.
        let mut state = init(&tiny_arch(), 4).unwrap();
        state.ensure_momentum();
        for p in state.momentum_encoder.as_mut().unwrap().params_mut() {
            p.fill(1.0);
        }
        for p in state.encoder.params_mut() {
            p.fill(0.0);
        }
        momentum_update(&mut state, 0.99).unwrap();
        for p in state.momentum_encoder.as_ref().unwrap().params() {
            for &v in p {
                assert!((v - 0.99).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn momentum_zero_makes_forwards_agree() {
        let mut state = init(&tiny_arch(), 6).unwrap();
        state.ensure_momentum();
        for p in state.encoder.params_mut() {
            for v in p.iter_mut() {
                *v *= 1.5;
            }
        }
        momentum_update(&mut state, 0.0).unwrap();
        let batch = sample_batch(2);
        let x = batch_to_array(&batch).unwrap();
        let live = state.encoder.forward(&x);
        let frozen = state.momentum_encoder.as_ref().unwrap().forward(&x);
        assert_eq!(live, frozen);
    }

    #[test]
    fn dictionary_is_fifo_with_eviction() {
        let mut state = init(&tiny_arch(), 0).unwrap();
        state.dictionary.set_capacity(2);
        let key = |v: f32| Array2::from_elem((1, 6), v);
        enqueue_keys(&mut state, &key(1.0)).unwrap();
        enqueue_keys(&mut state, &key(2.0)).unwrap();
        enqueue_keys(&mut state, &key(3.0)).unwrap();
        let held: Vec<f32> = state.dictionary.iter().map(|k| k[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
    }

    #[test]
    fn dictionary_rejects_wrong_width_and_respects_capacity() {
        let mut state = init(&tiny_arch(), 0).unwrap();
        state.dictionary.set_capacity(16);
        assert!(enqueue_keys(&mut state, &Array2::zeros((1, 5))).is_err());
        let mut r = rng::stream(9);
        for _ in 0..50 {
            let n: usize = r.random_range(1..4);
            enqueue_keys(&mut state, &Array2::zeros((n, 6))).unwrap();
            assert!(state.dictionary.len() <= 16);
        }
        assert_eq!(state.dictionary.len(), 16);
    }

    #[test]
    fn batch_must_be_uniform_and_nonempty() {
        let state = init(&tiny_arch(), 0).unwrap();
        assert!(forward_features(&state, &[]).is_err());
        let a = ImageTensor::constant(16, 16, 3, 0.5).unwrap();
        let b = ImageTensor::constant(8, 8, 3, 0.5).unwrap();
        assert!(forward_features(&state, &[a, b]).is_err());
    }

    /// End-to-end gradient check through conv, norm, relu, gap, feature
    /// layer, and head: loss = Σ coeffs·proj.
    #[test]
    fn full_network_gradients_match_finite_differences() {
        let arch = tiny_arch();
        let state = init(&arch, 11).unwrap();
        let batch = sample_batch(2);
        let x = batch_to_array(&batch).unwrap();

        let mut r = rng::stream(12);
        let (proj0, _) = {
            let (f, ep) = state.encoder.forward_cached(x.clone());
            let (p, hp) = state.head.forward_cached(f);
            (p, (ep, hp))
        };
        let coeffs = Array2::from_shape_fn(proj0.dim(), |_| r.random_range(-1.0f32..1.0));

        let loss_of = |s: &EncoderState| -> f64 {
            let f = s.encoder.forward(&x);
            let p = s.head.forward(&f);
            p.iter()
                .zip(coeffs.iter())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum()
        };

        let (features, epass) = state.encoder.forward_cached(x.clone());
        let (_proj, hpass) = state.head.forward_cached(features);
        let (grad_features, hgrads) = state.head.backward(&hpass, &coeffs);
        let egrads = state.encoder.backward(&epass, &grad_features);

        // Spot-check a handful of parameters per tensor against central
        // differences. GroupNorm makes the map nonlinear, so use a small
        // step and a loose-but-meaningful tolerance.
        let h = 1e-2f32;
        let analytic: Vec<Vec<f32>> = {
            let mut v: Vec<&[f32]> = egrads.views();
            v.extend(hgrads.views());
            v.into_iter().map(|s| s.to_vec()).collect()
        };
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            let len = analytic[ti].len();
            for _ in 0..3 {
                let pi = r.random_range(0..len);
                let mut plus = state.clone();
                {
                    let mut params = plus.encoder.params_mut();
                    params.extend(plus.head.params_mut());
                    params[ti][pi] += h;
                }
                let mut minus = state.clone();
                {
                    let mut params = minus.encoder.params_mut();
                    params.extend(minus.head.params_mut());
                    params[ti][pi] -= h;
                }
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
                let an = f64::from(analytic[ti][pi]);
                assert!(
                    (fd - an).abs() < 5e-2 * (1.0 + an.abs()),
                    "tensor {ti} param {pi}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
