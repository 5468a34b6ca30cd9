//! Adaptive-moment optimizer.

use crate::error::{Error, Result};

/// Adam with bias correction. Moment state is kept per parameter tensor,
/// keyed by position in the caller's fixed parameter order; the first
/// `step` call sizes the slots.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(learning_rate: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            t: 0,
            slots: Vec::new(),
        }
    }

    /// One update over all parameter tensors. `params` and `grads` must
    /// line up pairwise and keep the same order across calls.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer was initialized with {} tensors, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            if p.len() != g.len() || p.len() != slot.m.len() {
                return Err(Error::invalid(
                    "parameter/gradient tensor sizes changed between steps",
                ));
            }
            for i in 0..p.len() {
                let m = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                let v = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                slot.m[i] = m;
                slot.v[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
