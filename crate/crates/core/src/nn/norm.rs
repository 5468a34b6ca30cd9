//! Group normalization.
//!
//! Normalizes over channel groups per sample, so statistics never mix
//! across the batch: forward passes stay pure and a singleton batch
//! equals its row inside a larger batch, which the model module's
//! consistency invariants depend on.

use ndarray::{Array1, Array4};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub groups: usize,
    pub eps: f32,
}

pub struct GroupNormCache {
    normalized: Array4<f32>,
    inv_std: Vec<f32>, // per (batch, group)
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "channels {channels} must divide evenly into groups {groups}"
            )));
        }
        Ok(GroupNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, GroupNormCache) {
        let (b, c, h, w) = x.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let mut normalized = Array4::<f32>::zeros((b, c, h, w));
        let mut out = Array4::<f32>::zeros((b, c, h, w));
        let mut inv_std = vec![0.0f32; b * self.groups];

        for bi in 0..b {
            for g in 0..self.groups {
                let c0 = g * cg;
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for ci in c0..c0 + cg {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = f64::from(x[(bi, ci, y, xx)]);
                            sum += v;
                            sumsq += v * v;
                        }
                    }
                }
                let mean = sum / n;
                let var = (sumsq / n - mean * mean).max(0.0);
                let istd = 1.0 / (var + f64::from(self.eps)).sqrt();
                inv_std[bi * self.groups + g] = istd as f32;
                for ci in c0..c0 + cg {
                    let ga = self.gamma[ci];
                    let be = self.beta[ci];
                    for y in 0..h {
                        for xx in 0..w {
                            let xh = ((f64::from(x[(bi, ci, y, xx)]) - mean) * istd) as f32;
                            normalized[(bi, ci, y, xx)] = xh;
                            out[(bi, ci, y, xx)] = ga * xh + be;
                        }
                    }
                }
            }
        }
        (out, GroupNormCache { normalized, inv_std })
    }

    /// Returns (grad_input, grad_gamma, grad_beta).
    pub fn backward(
        &self,
        cache: &GroupNormCache,
        grad_out: &Array4<f32>,
    ) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
        let (b, c, h, w) = grad_out.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let mut grad_gamma = Array1::<f32>::zeros(c);
        let mut grad_beta = Array1::<f32>::zeros(c);
        let mut grad_x = Array4::<f32>::zeros((b, c, h, w));

        for bi in 0..b {
            for g in 0..self.groups {
                let c0 = g * cg;
                let istd = f64::from(cache.inv_std[bi * self.groups + g]);
                // First pass: per-channel param grads plus the two group
                // sums the input gradient needs.
                let mut s1 = 0.0f64; // sum of dxhat
                let mut s2 = 0.0f64; // sum of dxhat * xhat
                for ci in c0..c0 + cg {
                    let ga = f64::from(self.gamma[ci]);
                    for y in 0..h {
                        for xx in 0..w {
                            let go = f64::from(grad_out[(bi, ci, y, xx)]);
                            let xh = f64::from(cache.normalized[(bi, ci, y, xx)]);
                            grad_gamma[ci] += (go * xh) as f32;
                            grad_beta[ci] += go as f32;
                            let dxh = go * ga;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    }
                }
                for ci in c0..c0 + cg {
                    let ga = f64::from(self.gamma[ci]);
                    for y in 0..h {
                        for xx in 0..w {
                            let go = f64::from(grad_out[(bi, ci, y, xx)]);
                            let xh = f64::from(cache.normalized[(bi, ci, y, xx)]);
                            let dxh = go * ga;
                            grad_x[(bi, ci, y, xx)] =
                                (istd * (dxh - (s1 + xh * s2) / n)) as f32;
                        }
                    }
                }
            }
        }
        (grad_x, grad_gamma, grad_beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_input(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut r = rng::stream(seed);
        Array4::from_shape_fn((b, c, h, w), |_| r.random_range(-2.0f32..2.0))
    }

    #[test]
    fn normalized_groups_have_zero_mean_unit_variance() {
        let gn = GroupNorm::new(8, 4).unwrap();
        let x = random_input(3, 8, 5, 5, 1);
        let (y, _) = gn.forward(&x);
        for bi in 0..3 {
            for g in 0..4 {
                let mut vals = Vec::new();
                for ci in g * 2..g * 2 + 2 {
                    for yy in 0..5 {
                        for xx in 0..5 {
                            vals.push(f64::from(y[(bi, ci, yy, xx)]));
                        }
                    }
                }
                let n = vals.len() as f64;
                let mean: f64 = vals.iter().sum::<f64>() / n;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-5, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "group variance {var}");
            }
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let gn = GroupNorm::new(4, 2).unwrap();
        let x2 = random_input(2, 4, 3, 3, 2);
        let x1 = x2
            .slice(ndarray::s![0..1, .., .., ..])
            .to_owned();
        let (y2, _) = gn.forward(&x2);
        let (y1, _) = gn.forward(&x1);
        for ci in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    assert_eq!(y1[(0, ci, y, x)], y2[(0, ci, y, x)]);
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_channel_counts() {
        assert!(GroupNorm::new(6, 4).is_err());
        assert!(GroupNorm::new(8, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut gn = GroupNorm::new(4, 2).unwrap();
        let mut r = rng::stream(7);
        for v in gn.gamma.iter_mut() {
            *v = r.random_range(0.5f32..1.5);
        }
        for v in gn.beta.iter_mut() {
            *v = r.random_range(-0.5f32..0.5);
        }
        let x = random_input(2, 4, 4, 4, 8);
        let (y, cache) = gn.forward(&x);
        let coeffs = Array4::from_shape_fn(y.dim(), |_| r.random_range(-1.0f32..1.0));
        let loss = |out: &Array4<f32>| -> f64 {
            out.iter()
                .zip(coeffs.iter())
                .map(|(&o, &c)| f64::from(o) * f64::from(c))
                .sum()
        };
        let (gx, gg, gb) = gn.backward(&cache, &coeffs);

        let h = 1e-2f32;
        for _ in 0..25 {
            let idx = (
                r.random_range(0..2usize),
                r.random_range(0..4usize),
                r.random_range(0..4usize),
                r.random_range(0..4usize),
            );
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&gn.forward(&xp).0) - loss(&gn.forward(&xm).0)) / (2.0 * h as f64);
            let an = f64::from(gx[idx]);
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + an.abs()),
                "input grad at {idx:?}: fd {fd} vs analytic {an}"
            );
        }
        for ci in 0..4 {
            let mut gp = gn.clone();
            gp.gamma[ci] += h;
            let mut gm = gn.clone();
            gm.gamma[ci] -= h;
            let fd = (loss(&gp.forward(&x).0) - loss(&gm.forward(&x).0)) / (2.0 * h as f64);
            let an = f64::from(gg[ci]);
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + an.abs()),
                "gamma grad {ci}: fd {fd} vs analytic {an}"
            );

            let mut bp = gn.clone();
            bp.beta[ci] += h;
            let mut bm = gn.clone();
            bm.beta[ci] -= h;
            let fd = (loss(&bp.forward(&x).0) - loss(&bm.forward(&x).0)) / (2.0 * h as f64);
            let an = f64::from(gb[ci]);
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + an.abs()),
                "beta grad {ci}: fd {fd} vs analytic {an}"
            );
        }
    }
}
