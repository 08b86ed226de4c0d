//! Dense float image buffer, row-major with interleaved channels.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A `width x height x channels` image of f64 samples.
///
/// Storage is row-major: index `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut img = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.idx(x, y, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, width: usize, height: usize, channels: usize) -> Result<()> {
        if self.width != width || self.height != height || self.channels != channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height}x{channels}"),
                got: format!("{}x{}x{}", self.width, self.height, self.channels),
            });
        }
        Ok(())
    }

    /// Elementwise a + s*b into a new image; shapes must match.
    pub fn add_scaled(&self, other: &Image, scale: f64) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.width, self.height, self.channels),
                got: format!("{}x{}x{}", other.width, other.height, other.channels),
            });
        }
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(other.data.iter()) {
            *o += scale * b;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Image {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mean squared error between two images of identical shape.
pub fn mse(a: &Image, b: &Image) -> f64 {
    debug_assert!(a.same_shape(b));
    let n = a.data.len().max(1) as f64;
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// PSNR in dB for images in [0, 1], capped at 99 dB when the MSE underflows.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let e = mse(a, b);
    if e < 1e-10 {
        99.0
    } else {
        (10.0 * (1.0 / e).log10()).min(99.0)
    }
}

/// Intersection-over-union of two masks binarized at 0.5.
pub fn mask_iou(a: &Image, b: &Image) -> f64 {
    debug_assert!(a.same_shape(b));
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let ax = *x >= 0.5;
        let bx = *y >= 0.5;
        if ax && bx {
            inter += 1;
        }
        if ax || bx {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
