//! Desk-scale laboratory for studying data poisoning of contrastively
//! trained image encoders.
//!
//! The crate covers the full experimental loop: synthetic dataset
//! generation, poison construction by concatenating target and reference
//! images, contrastive pre-training (SimCLR-style in-batch contrast and
//! MoCo-style momentum dictionaries), downstream linear evaluation, a set
//! of defenses, and an experiment runner that aggregates trials into
//! tables and plots.
//!
//! Everything is deterministic: every source of randomness is a named
//! ChaCha8 stream derived from a master seed, reductions run in a fixed
//! order on a single thread, and the on-disk formats round-trip
//! byte-exactly.

pub mod attack;
pub mod augment;
pub mod data;
pub mod defense;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
