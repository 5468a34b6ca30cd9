//! Strided 2-d convolution via im2col and GEMM.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};

/// 2-d convolution with square kernels, zero padding, and no bias (a
/// normalization layer with its own shift always follows). The weight is
/// stored GEMM-ready as [out_channels, in_channels·k·k].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f32>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Forward-pass byproducts the backward pass needs: the unfolded input
/// and its original spatial shape.
pub struct ConvCache {
    col: Array2<f32>,
    batch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("kernel and stride must be at least 1"));
        }
        Ok(Conv2d {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_size(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let oh = (in_h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (in_w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Unfolds `x` into a [B·OH·OW, C·k·k] matrix; out-of-bounds taps
    /// read zero.
    fn im2col(&self, x: &Array4<f32>) -> Array2<f32> {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let mut col = Array2::<f32>::zeros((b * oh * ow, c * k * k));
        let x_slice = x.as_slice().expect("input tensor is contiguous");
        let col_slice = col.as_slice_mut().expect("freshly allocated");
        let row_len = c * k * k;
        for bi in 0..b {
            for oy in 0..oh {
                let base_y = (oy * self.stride) as isize - self.padding as isize;
                for ox in 0..ow {
                    let base_x = (ox * self.stride) as isize - self.padding as isize;
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        for ky in 0..k {
                            let sy = base_y + ky as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = base_x + kx as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                col_slice[row + (ci * k + ky) * k + kx] =
                                    x_slice[plane + sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds unfolded gradients back to input layout; the adjoint
    /// of [`Conv2d::im2col`].
    fn col2im(&self, grad_col: &Array2<f32>, b: usize, h: usize, w: usize) -> Array4<f32> {
        let c = self.in_channels;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let mut gx = Array4::<f32>::zeros((b, c, h, w));
        let gx_slice = gx.as_slice_mut().expect("freshly allocated");
        let g_slice = grad_col.as_slice().expect("gemm output is contiguous");
        let row_len = c * k * k;
        for bi in 0..b {
            for oy in 0..oh {
                let base_y = (oy * self.stride) as isize - self.padding as isize;
                for ox in 0..ow {
                    let base_x = (ox * self.stride) as isize - self.padding as isize;
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        for ky in 0..k {
                            let sy = base_y + ky as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = base_x + kx as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                gx_slice[plane + sy as usize * w + sx as usize] +=
                                    g_slice[row + (ci * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (b, _c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let col = self.im2col(x);
        let out_mat = col.dot(&self.weight.t()); // [B·OH·OW, C_out]
        let mut out = Array4::<f32>::zeros((b, self.out_channels, oh, ow));
        {
            let out_slice = out.as_slice_mut().expect("freshly allocated");
            let mat = out_mat.as_slice().expect("gemm output is contiguous");
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((bi * oh + oy) * ow + ox) * self.out_channels;
                        for co in 0..self.out_channels {
                            out_slice[((bi * self.out_channels + co) * oh + oy) * ow + ox] =
                                mat[row + co];
                        }
                    }
                }
            }
        }
        (
            out,
            ConvCache {
                col,
                batch: b,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    /// Returns (grad_input, grad_weight).
    pub fn backward(&self, cache: &ConvCache, grad_out: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let b = cache.batch;
        let (oh, ow) = (cache.out_h, cache.out_w);
        // Reorder grad_out into the GEMM row layout [B·OH·OW, C_out].
        let mut g_mat = Array2::<f32>::zeros((b * oh * ow, self.out_channels));
        {
            let g_slice = g_mat.as_slice_mut().expect("freshly allocated");
            let go = grad_out.as_slice().expect("gradient tensor is contiguous");
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((bi * oh + oy) * ow + ox) * self.out_channels;
                        for co in 0..self.out_channels {
                            g_slice[row + co] =
                                go[((bi * self.out_channels + co) * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
        let grad_w = g_mat.t().dot(&cache.col); // [C_out, C·k·k]
        let grad_col = g_mat.dot(&self.weight); // [B·OH·OW, C·k·k]
        let grad_x = self.col2im(&grad_col, b, cache.in_h, cache.in_w);
        (grad_x, grad_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_conv(ci: usize, co: usize, k: usize, s: usize, p: usize, seed: u64) -> Conv2d {
        let mut conv = Conv2d::new(ci, co, k, s, p).unwrap();
        let mut r = rng::stream(seed);
        for v in conv.weight.iter_mut() {
            *v = r.random_range(-0.5f32..0.5);
        }
        conv
    }

    fn random_input(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut r = rng::stream(seed);
        Array4::from_shape_fn((b, c, h, w), |_| r.random_range(-1.0f32..1.0))
    }

    /// Direct nested-loop convolution, the oracle for the GEMM path.
    fn conv_reference(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Array4::<f32>::zeros((b, conv.out_channels, oh, ow));
        for bi in 0..b {
            for co in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let sx = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += f64::from(x[(bi, ci, sy as usize, sx as usize)])
                                        * f64::from(conv.weight[(co, (ci * k + ky) * k + kx)]);
                                }
                            }
                        }
                        out[(bi, co, oy, ox)] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_nested_loop_reference() {
        for (seed, (s, p)) in [(1u64, (1, 1)), (2, (2, 1)), (3, (1, 0)), (4, (2, 0))]
            .into_iter()
            .enumerate()
        {
            let conv = random_conv(3, 5, 3, p.0, p.1, seed as u64 + 10);
            let x = random_input(2, 3, 9, 8, seed as u64 + 20);
            let (y, _) = conv.forward(&x);
            let want = conv_reference(&conv, &x);
            assert_eq!(y.dim(), want.dim());
            let _ = s;
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_shape_halves_with_stride_two() {
        let conv = Conv2d::new(3, 8, 3, 2, 1).unwrap();
        assert_eq!(conv.output_size(32, 32), (16, 16));
        assert_eq!(conv.output_size(16, 16), (8, 8));
    }

    /// The convolution is linear, so central differences are exact up to
    /// float rounding for any step. Loss = sum of out·coeffs.
    #[test]
    fn gradients_match_finite_differences() {
        let conv = random_conv(2, 4, 3, 2, 1, 42);
        let x = random_input(2, 2, 8, 8, 43);
        let (y, cache) = conv.forward(&x);
        let mut r = rng::stream(44);
        let coeffs = Array4::from_shape_fn(y.dim(), |_| r.random_range(-1.0f32..1.0));

        let loss = |out: &Array4<f32>| -> f64 {
            out.iter()
                .zip(coeffs.iter())
                .map(|(&o, &c)| f64::from(o) * f64::from(c))
                .sum()
        };
        let (gx, gw) = conv.backward(&cache, &coeffs);

        let h = 0.05f32;
        // Sample input coordinates.
        let mut r = rng::stream(45);
        for _ in 0..20 {
            let idx = (
                r.random_range(0..2usize),
                r.random_range(0..2usize),
                r.random_range(0..8usize),
                r.random_range(0..8usize),
            );
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv.forward(&xp).0) - loss(&conv.forward(&xm).0)) / (2.0 * h as f64);
            let an = f64::from(gx[idx]);
            assert!(
                (fd - an).abs() < 1e-3 * (1.0 + an.abs()),
                "input grad at {idx:?}: fd {fd} vs analytic {an}"
            );
        }
        // Sample weight coordinates.
        for _ in 0..20 {
            let idx = (r.random_range(0..4usize), r.random_range(0..18usize));
            let mut cp = conv.clone();
            cp.weight[idx] += h;
            let mut cm = conv.clone();
            cm.weight[idx] -= h;
            let fd = (loss(&cp.forward(&x).0) - loss(&cm.forward(&x).0)) / (2.0 * h as f64);
            let an = f64::from(gw[idx]);
            assert!(
                (fd - an).abs() < 1e-3 * (1.0 + an.abs()),
                "weight grad at {idx:?}: fd {fd} vs analytic {an}"
            );
        }
    }
}
