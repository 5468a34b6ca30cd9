//! Dense ops: fully connected layers, ReLU, global average pooling.

use ndarray::{Array1, Array2, Array4, Axis};

/// Fully connected layer, weight stored as [out, in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    /// Returns (grad_input, grad_weight, grad_bias); `x` is the forward
    /// input.
    pub fn backward(
        &self,
        x: &Array2<f32>,
        grad_out: &Array2<f32>,
    ) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
        let grad_w = grad_out.t().dot(x);
        let grad_b = grad_out.sum_axis(Axis(0));
        let grad_x = grad_out.dot(&self.weight);
        (grad_x, grad_w, grad_b)
    }
}

pub fn relu2_forward(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

/// `y` is the forward output (nonzero exactly where the unit was
/// active); ties at exactly zero pass no gradient.
pub fn relu2_backward(y: &Array2<f32>, grad_out: &Array2<f32>) -> Array2<f32> {
    let mut g = grad_out.clone();
    g.zip_mut_with(y, |gv, &yv| {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

pub fn relu4_forward(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu4_backward(y: &Array4<f32>, grad_out: &Array4<f32>) -> Array4<f32> {
    let mut g = grad_out.clone();
    g.zip_mut_with(y, |gv, &yv| {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// Mean over the spatial extent: [B, C, H, W] -> [B, C].
pub fn gap_forward(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut out = Array2::<f32>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0f32;
            for y in 0..h {
                for xx in 0..w {
                    acc += x[(bi, ci, y, xx)];
                }
            }
            out[(bi, ci)] = acc * scale;
        }
    }
    out
}

pub fn gap_backward(grad_out: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (b, c) = grad_out.dim();
    let scale = 1.0 / (h * w) as f32;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| grad_out[(bi, ci)] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn linear_forward_matches_scalar_arithmetic() {
        let mut l = Linear::new(3, 2);
        l.weight = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        l.bias = Array1::from_vec(vec![0.1, -0.2]);
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 1.0, 2.0]).unwrap();
        let y = l.forward(&x);
        assert!((y[(0, 0)] - (1.0 + 2.0 + 6.0 + 0.1)).abs() < 1e-6);
        assert!((y[(0, 1)] - (-1.0 + 0.5 + 0.0 - 0.2)).abs() < 1e-6);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng::stream(11);
        let mut l = Linear::new(4, 3);
        for v in l.weight.iter_mut() {
            *v = r.random_range(-1.0f32..1.0);
        }
        for v in l.bias.iter_mut() {
            *v = r.random_range(-1.0f32..1.0);
        }
        let x = Array2::from_shape_fn((2, 4), |_| r.random_range(-1.0f32..1.0));
        let coeffs = Array2::from_shape_fn((2, 3), |_| r.random_range(-1.0f32..1.0));
        let loss = |y: &Array2<f32>| -> f64 {
            y.iter()
                .zip(coeffs.iter())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum()
        };
        let (gx, gw, gb) = l.backward(&x, &coeffs);
        let h = 0.05f32;

        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = (loss(&l.forward(&xp)) - loss(&l.forward(&xm))) / (2.0 * h as f64);
                assert!((fd - f64::from(gx[(i, j)])).abs() < 1e-3);
            }
        }
        for i in 0..3 {
            for j in 0..4 {
                let mut lp = l.clone();
                lp.weight[(i, j)] += h;
                let mut lm = l.clone();
                lm.weight[(i, j)] -= h;
                let fd = (loss(&lp.forward(&x)) - loss(&lm.forward(&x))) / (2.0 * h as f64);
                assert!((fd - f64::from(gw[(i, j)])).abs() < 1e-3);
            }
            let mut lp = l.clone();
            lp.bias[i] += h;
            let mut lm = l.clone();
            lm.bias[i] -= h;
            let fd = (loss(&lp.forward(&x)) - loss(&lm.forward(&x))) / (2.0 * h as f64);
            assert!((fd - f64::from(gb[i])).abs() < 1e-3);
        }
    }

    #[test]
    fn relu_masks_gradient_where_inactive() {
        let x = Array2::from_shape_vec((1, 4), vec![-1.0, 2.0, -0.5, 3.0]).unwrap();
        let y = relu2_forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 2.0, 0.0, 3.0]);
        let g = Array2::from_shape_vec((1, 4), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let gx = relu2_backward(&y, &g);
        assert_eq!(gx.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn gap_averages_and_distributes_evenly() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, xx)| {
            (c * 4 + y * 2 + xx) as f32
        });
        let y = gap_forward(&x);
        assert!((y[(0, 0)] - 1.5).abs() < 1e-6);
        assert!((y[(0, 1)] - 5.5).abs() < 1e-6);
        let g = Array2::from_shape_vec((1, 2), vec![4.0, 8.0]).unwrap();
        let gx = gap_backward(&g, 2, 2);
        assert_eq!(gx[(0, 0, 0, 0)], 1.0);
        assert_eq!(gx[(0, 1, 1, 1)], 2.0);
    }
}
