//! Neural-network building blocks.
//!
//! A minimal, fully deterministic layer set for the desk-scale encoder:
//! strided 3x3 convolutions (im2col + GEMM), group normalization (batch
//! independent, so forward passes are pure), ReLU, global average
//! pooling, fully connected layers, and Adam. Every layer carries an
//! exact hand-derived backward pass; finite-difference tests in each
//! submodule keep them honest.
//!
//! Activation layout is [B, C, H, W] for convolutional tensors and
//! [B, D] for dense ones. All math is f32 with fixed reduction order.

mod adam;
mod conv;
mod dense;
mod norm;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use dense::{gap_backward, gap_forward, relu2_backward, relu2_forward, relu4_backward,
                relu4_forward, Linear};
pub use norm::{GroupNorm, GroupNormCache};
