//! Floating-point image workspace.
//!
//! [`Plane`] is the crate-internal staging buffer for every geometric or
//! photometric transform: pixels live as `f32` in [0,1], channel-last,
//! and are quantized back to 8-bit only once when a transform chain
//! finishes. Quantization rounds half away from zero, so a byte that
//! round-trips through a no-op chain comes back unchanged.

use super::ImageTensor;

#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn from_image(img: &ImageTensor) -> Self {
        Plane {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
            data: img.bytes().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Quantizes back to 8-bit, clamping to [0,1] first.
    pub fn into_image(self) -> ImageTensor {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageTensor::new(self.height, self.width, self.channels, bytes)
            .expect("plane dimensions are valid by construction")
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Plane {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    /// Bilinear resampling with half-pixel-center alignment: source
    /// coordinate s = (d + 0.5)·in/out − 0.5, clamped to the source
    /// extent. Resampling to the same size is the exact identity, and a
    /// constant image stays constant.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Plane {
        let mut out = Plane::zeros(out_h, out_w, self.channels);
        let sy = self.height as f32 / out_h as f32;
        let sx = self.width as f32 / out_w as f32;
        for y in 0..out_h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..out_w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..self.channels {
                    let p00 = self.get(y0, x0, c);
                    let p01 = self.get(y0, x1, c);
                    let p10 = self.get(y1, x0, c);
                    let p11 = self.get(y1, x1, c);
                    let top = p00 + (p01 - p00) * tx;
                    let bot = p10 + (p11 - p10) * tx;
                    out.set(y, x, c, top + (bot - top) * ty);
                }
            }
        }
        out
    }

    /// Copies out the `crop_h`×`crop_w` region whose top-left corner is
    /// (y0, x0). Caller guarantees the region fits.
    pub fn crop(&self, y0: usize, x0: usize, crop_h: usize, crop_w: usize) -> Plane {
        debug_assert!(y0 + crop_h <= self.height && x0 + crop_w <= self.width);
        let mut out = Plane::zeros(crop_h, crop_w, self.channels);
        for y in 0..crop_h {
            let src = self.idx(y0 + y, x0, 0);
            let dst = out.idx(y, 0, 0);
            let row = crop_w * self.channels;
            out.data[dst..dst + row].copy_from_slice(&self.data[src..src + row]);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Plane {
        let mut out = Plane::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Stacks `top` above `bottom`; shapes must match.
    pub fn stack_vertical(top: &Plane, bottom: &Plane) -> Plane {
        debug_assert!(
            top.height == bottom.height
                && top.width == bottom.width
                && top.channels == bottom.channels
        );
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Plane {
            height: top.height + bottom.height,
            width: top.width,
            channels: top.channels,
            data,
        }
    }

    /// Places `left` beside `right`; shapes must match.
    pub fn stack_horizontal(left: &Plane, right: &Plane) -> Plane {
        debug_assert!(
            left.height == right.height
                && left.width == right.width
                && left.channels == right.channels
        );
        let mut out = Plane::zeros(left.height, left.width + right.width, left.channels);
        let lrow = left.width * left.channels;
        let rrow = right.width * right.channels;
        for y in 0..left.height {
            let dst = out.idx(y, 0, 0);
            out.data[dst..dst + lrow].copy_from_slice(&left.data[y * lrow..(y + 1) * lrow]);
            out.data[dst + lrow..dst + lrow + rrow]
                .copy_from_slice(&right.data[y * rrow..(y + 1) * rrow]);
        }
        out
    }
}
