//! Differentiable renderers and their shared buffer types.

pub mod mesh;
pub mod neus;

use crate::error::{Error, Result};
use crate::img::Image;
use nalgebra::Vector3;

/// What the RGB buffer holds. Depth/normal/mask are mode-independent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RenderMode {
    /// Albedo color.
    Rgb,
    /// Normals encoded as colors, (n + 1) / 2.
    NormalMap,
    /// Albedo shaded by a directional light: ambient + (1−ambient)·max(0, n·l̂).
    Lambertian { light_dir: Vector3<f64> },
}

/// Ambient floor for Lambertian shading.
pub const LAMBERT_AMBIENT: f64 = 0.2;

pub(crate) fn lambert_shade(normal: &Vector3<f64>, light_dir: &Vector3<f64>) -> f64 {
    LAMBERT_AMBIENT + (1.0 - LAMBERT_AMBIENT) * normal.dot(light_dir).max(0.0)
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub mode: RenderMode,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { samples_per_ray: 48, near: 0.5, far: 6.5, mode: RenderMode::Rgb }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 16 {
            return Err(Error::InvalidRenderOptions(format!(
                "samples_per_ray must be at least 16, got {}",
                self.samples_per_ray
            )));
        }
        if self.near >= self.far {
            return Err(Error::InvalidRenderOptions(format!(
                "near ({}) must be less than far ({})",
                self.near, self.far
            )));
        }
        if let RenderMode::Lambertian { light_dir } = self.mode {
            if (light_dir.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidRenderOptions(
                    "Lambertian light direction must be unit length".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One render pass worth of image buffers.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// W×H×3 in [0,1]; contents depend on the render mode.
    pub rgb: Image,
    /// W×H expected ray distance; 0 where nothing was hit.
    pub depth: Image,
    /// W×H×3 unit composite normals (zero where nothing was hit).
    pub normal: Image,
    /// W×H accumulated opacity in [0,1].
    pub mask: Image,
}

impl RenderOutput {
    pub fn new(width: usize, height: usize) -> Self {
        RenderOutput {
            rgb: Image::zeros(width, height, 3),
            depth: Image::zeros(width, height, 1),
            normal: Image::zeros(width, height, 3),
            mask: Image::zeros(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }
}

/// Image-space gradients of a scalar loss with respect to each output buffer.
/// Buffers the loss does not touch stay zero.
#[derive(Clone, Debug)]
pub struct RenderAdjoint {
    pub rgb: Image,
    pub depth: Image,
    pub normal: Image,
    pub mask: Image,
}

impl RenderAdjoint {
    pub fn zeros(width: usize, height: usize) -> Self {
        RenderAdjoint {
            rgb: Image::zeros(width, height, 3),
            depth: Image::zeros(width, height, 1),
            normal: Image::zeros(width, height, 3),
            mask: Image::zeros(width, height, 1),
        }
    }

    pub fn check_shape(&self, width: usize, height: usize) -> Result<()> {
        for (img, ch) in [(&self.rgb, 3), (&self.depth, 1), (&self.normal, 3), (&self.mask, 1)] {
            if img.width != width || img.height != height || img.channels != ch {
                return Err(Error::ShapeMismatch {
                    expected: format!("{width}×{height}×{ch} adjoint"),
                    got: format!("{}×{}×{}", img.width, img.height, img.channels),
                });
            }
        }
        Ok(())
    }

    /// ⟨adjoint, output⟩ — the scalar loss whose gradient the adjoint encodes.
    /// Used by finite-difference checks.
    pub fn contract(&self, out: &RenderOutput) -> f64 {
        self.rgb.dot(&out.rgb) + self.depth.dot(&out.depth) + self.normal.dot(&out.normal)
            + self.mask.dot(&out.mask)
    }
}

/// Runs `per_item` over `0..n` in parallel chunks, each chunk accumulating
/// into its own state, then merges chunk states sequentially in index order —
/// bitwise-deterministic regardless of thread scheduling.
pub(crate) fn parallel_accumulate<T: Send>(
    n: usize,
    max_chunks: usize,
    init: impl Fn() -> T + Sync,
    per_item: impl Fn(&mut T, usize) + Sync,
    mut merge: impl FnMut(&mut T, T),
) -> T {
    use rayon::prelude::*;
    let chunk = n.div_ceil(max_chunks.max(1)).max(1);
    let ranges: Vec<(usize, usize)> =
        (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let parts: Vec<T> = ranges
        .par_iter()
        .map(|&(s, e)| {
            let mut acc = init();
            for i in s..e {
                per_item(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = init();
    for part in parts {
        merge(&mut total, part);
    }
    total
}
