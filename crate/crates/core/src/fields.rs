//! Dense multi-resolution grid fields: signed distance and color.
//!
//! A field is a stack of trilinear grids over the cube [−r, r]³ whose values
//! are summed across levels at query time. Queries are restricted to the
//! bounding sphere of radius r; outside it the signed distance falls back to
//! an analytic positive value (empty space) and color to a constant
//! background. Interpolation is exact at grid corners and its spatial
//! gradient is the exact analytic derivative of the interpolant, so every
//! downstream gradient can be checked against finite differences.

use crate::error::{Error, Result};
use crate::io::{Container, Payload};
use nalgebra::Vector3;

/// Positive signed-distance margin added to queries outside the bounding sphere.
pub const OUTSIDE_MARGIN: f64 = 0.1;

/// One dense grid level: `resolution³` cells and `(resolution+1)³` corners,
/// `channels` values per corner, x fastest in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLevel {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl GridLevel {
    fn corner_count(resolution: usize) -> usize {
        let n = resolution + 1;
        n * n * n
    }
}

/// A stack of grid levels sharing one cubic domain. Evaluation sums levels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiGrid {
    pub channels: usize,
    /// Half-extent of the cube domain; doubles as the bounding-sphere radius.
    pub radius: f64,
    pub levels: Vec<GridLevel>,
}

/// Per-cell interpolation context: base corner index and fractional position.
struct Cell {
    base: [usize; 3],
    frac: [f64; 3],
}

impl MultiGrid {
    pub fn new(channels: usize, radius: f64, resolutions: &[usize]) -> Self {
        let levels = resolutions
            .iter()
            .map(|&r| GridLevel {
                resolution: r,
                values: vec![0.0; GridLevel::corner_count(r) * channels],
            })
            .collect();
        MultiGrid { channels, radius, levels }
    }

    /// World position of corner (x, y, z) of the given level.
    pub fn corner_pos(&self, level: usize, x: usize, y: usize, z: usize) -> Vector3<f64> {
        let r = self.levels[level].resolution as f64;
        let h = 2.0 * self.radius / r;
        Vector3::new(
            -self.radius + x as f64 * h,
            -self.radius + y as f64 * h,
            -self.radius + z as f64 * h,
        )
    }

    /// Overwrites every corner of every level using `f(level, position)`.
    pub fn fill(&mut self, mut f: impl FnMut(usize, &Vector3<f64>) -> Vec<f64>) {
        let channels = self.channels;
        let radius = self.radius;
        for (li, level) in self.levels.iter_mut().enumerate() {
            let res = level.resolution;
            let n = res + 1;
            let h = 2.0 * radius / res as f64;
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        let p = Vector3::new(
                            -radius + x as f64 * h,
                            -radius + y as f64 * h,
                            -radius + z as f64 * h,
                        );
                        let v = f(li, &p);
                        debug_assert_eq!(v.len(), channels);
                        let idx = (((z * n) + y) * n + x) * channels;
                        level.values[idx..idx + channels].copy_from_slice(&v);
                    }
                }
            }
        }
    }

    fn locate(&self, resolution: usize, p: &Vector3<f64>) -> Cell {
        let scale = resolution as f64 / (2.0 * self.radius);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = ((p[a] + self.radius) * scale).clamp(0.0, resolution as f64);
            let i = (u.floor() as usize).min(resolution - 1);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        Cell { base, frac }
    }

    /// Sum of per-level trilinear interpolants, one value per channel.
    /// The query must lie inside the cube domain; callers enforce the
    /// bounding-sphere restriction.
    pub fn eval_raw(&self, p: &Vector3<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        for level in &self.levels {
            let cell = self.locate(level.resolution, p);
            let n = level.resolution + 1;
            for cz in 0..2 {
                for cy in 0..2 {
                    for cx in 0..2 {
                        let w = axis_w(cell.frac[0], cx)
                            * axis_w(cell.frac[1], cy)
                            * axis_w(cell.frac[2], cz);
                        let idx = (((cell.base[2] + cz) * n + cell.base[1] + cy) * n
                            + cell.base[0]
                            + cx)
                            * self.channels;
                        for c in 0..self.channels {
                            out[c] += w * level.values[idx + c];
                        }
                    }
                }
            }
        }
    }

    pub fn eval1(&self, p: &Vector3<f64>) -> f64 {
        debug_assert_eq!(self.channels, 1);
        let mut out = [0.0];
        self.eval_raw(p, &mut out);
        out[0]
    }

    pub fn eval3(&self, p: &Vector3<f64>) -> Vector3<f64> {
        debug_assert_eq!(self.channels, 3);
        let mut out = [0.0; 3];
        self.eval_raw(p, &mut out);
        Vector3::new(out[0], out[1], out[2])
    }

    /// Analytic spatial gradient of the summed interpolant for one channel
    /// (piecewise constant per cell along each axis).
    pub fn grad_raw(&self, p: &Vector3<f64>, channel: usize) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for level in &self.levels {
            let cell = self.locate(level.resolution, p);
            let n = level.resolution + 1;
            let scale = level.resolution as f64 / (2.0 * self.radius);
            for cz in 0..2 {
                for cy in 0..2 {
                    for cx in 0..2 {
                        let idx = (((cell.base[2] + cz) * n + cell.base[1] + cy) * n
                            + cell.base[0]
                            + cx)
                            * self.channels
                            + channel;
                        let v = level.values[idx];
                        let (wx, wy, wz) = (
                            axis_w(cell.frac[0], cx),
                            axis_w(cell.frac[1], cy),
                            axis_w(cell.frac[2], cz),
                        );
                        let (dx, dy, dz) = (
                            axis_dw(cx),
                            axis_dw(cy),
                            axis_dw(cz),
                        );
                        g.x += v * dx * wy * wz * scale;
                        g.y += v * wx * dy * wz * scale;
                        g.z += v * wx * wy * dz * scale;
                    }
                }
            }
        }
        g
    }

    /// Total number of scalar parameters across all levels.
    pub fn param_len(&self) -> usize {
        self.levels.iter().map(|l| l.values.len()).sum()
    }

    /// Offset of a level's parameters in the flat parameter vector.
    pub fn level_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(|l| l.values.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for l in &self.levels {
            out.extend_from_slice(&l.values);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.param_len()),
                got: format!("{}", params.len()),
            });
        }
        let mut off = 0;
        for l in &mut self.levels {
            let len = l.values.len();
            l.values.copy_from_slice(&params[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Accumulates `adj · ∂value(p)[channel] / ∂params` into the flat
    /// gradient buffer (the 8 interpolation weights per level).
    pub fn scatter_value(&self, p: &Vector3<f64>, channel: usize, adj: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.param_len());
        let mut off = 0;
        for level in &self.levels {
            let cell = self.locate(level.resolution, p);
            let n = level.resolution + 1;
            for cz in 0..2 {
                for cy in 0..2 {
                    for cx in 0..2 {
                        let w = axis_w(cell.frac[0], cx)
                            * axis_w(cell.frac[1], cy)
                            * axis_w(cell.frac[2], cz);
                        let idx = (((cell.base[2] + cz) * n + cell.base[1] + cy) * n
                            + cell.base[0]
                            + cx)
                            * self.channels
                            + channel;
                        grad[off + idx] += adj * w;
                    }
                }
            }
            off += level.values.len();
        }
    }

    /// Accumulates `adj · ∂(spatial gradient of channel at p) / ∂params` into
    /// the flat gradient buffer (adjoint of `grad_raw` w.r.t. corner values).
    pub fn scatter_spatial_grad(
        &self,
        p: &Vector3<f64>,
        channel: usize,
        adj: &Vector3<f64>,
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.param_len());
        let mut off = 0;
        for level in &self.levels {
            let cell = self.locate(level.resolution, p);
            let n = level.resolution + 1;
            let scale = level.resolution as f64 / (2.0 * self.radius);
            for cz in 0..2 {
                for cy in 0..2 {
                    for cx in 0..2 {
                        let (wx, wy, wz) = (
                            axis_w(cell.frac[0], cx),
                            axis_w(cell.frac[1], cy),
                            axis_w(cell.frac[2], cz),
                        );
                        let (dx, dy, dz) = (axis_dw(cx), axis_dw(cy), axis_dw(cz));
                        let contrib = adj.x * dx * wy * wz * scale
                            + adj.y * wx * dy * wz * scale
                            + adj.z * wx * wy * dz * scale;
                        let idx = (((cell.base[2] + cz) * n + cell.base[1] + cy) * n
                            + cell.base[0]
                            + cx)
                            * self.channels
                            + channel;
                        grad[off + idx] += contrib;
                    }
                }
            }
            off += level.values.len();
        }
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        c.insert(
            &format!("{prefix}/resolutions"),
            Payload::U64 {
                dims: vec![self.levels.len() as u64],
                data: self.levels.iter().map(|l| l.resolution as u64).collect(),
            },
        );
        c.insert(&format!("{prefix}/radius"), Payload::scalar_f64(self.radius));
        c.insert(
            &format!("{prefix}/channels"),
            Payload::scalar_u64(self.channels as u64),
        );
        for (i, level) in self.levels.iter().enumerate() {
            let n = (level.resolution + 1) as u64;
            c.insert(
                &format!("{prefix}/level{i}"),
                Payload::F64 {
                    dims: vec![n, n, n, self.channels as u64],
                    data: level.values.clone(),
                },
            );
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let resolutions = c.get(&format!("{prefix}/resolutions"))?.as_u64()?.to_vec();
        let radius = c.get(&format!("{prefix}/radius"))?.as_f64()?[0];
        let channels = c.get(&format!("{prefix}/channels"))?.as_u64()?[0] as usize;
        let mut grid = MultiGrid::new(
            channels,
            radius,
            &resolutions.iter().map(|&r| r as usize).collect::<Vec<_>>(),
        );
        for (i, level) in grid.levels.iter_mut().enumerate() {
            let data = c.get(&format!("{prefix}/level{i}"))?.as_f64()?;
            if data.len() != level.values.len() {
                return Err(Error::Container(format!(
                    "section {prefix}/level{i} has wrong length"
                )));
            }
            level.values.copy_from_slice(data);
        }
        Ok(grid)
    }
}

fn axis_w(f: f64, corner: usize) -> f64 {
    if corner == 1 {
        f
    } else {
        1.0 - f
    }
}

fn axis_dw(corner: usize) -> f64 {
    if corner == 1 {
        1.0
    } else {
        -1.0
    }
}

fn check_finite(p: &Vector3<f64>) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidQueryPoint)
    }
}

/// Signed-distance field on a multi-resolution grid, plus the sharpness used
/// by the volume renderer's logistic opacity conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfField {
    pub grid: MultiGrid,
    /// Logistic steepness `s` of the SDF-to-opacity conversion.
    pub steepness: f64,
    /// Amplitude of the negative init blob (0 for ground-truth fields).
    pub bias_amplitude: f64,
}

impl SdfField {
    pub fn radius(&self) -> f64 {
        self.grid.radius
    }

    /// Signed distance at `p`: grid interpolant inside the bounding sphere,
    /// analytic positive distance (plus margin) outside it.
    pub fn eval(&self, p: &Vector3<f64>) -> Result<f64> {
        check_finite(p)?;
        let r = p.norm();
        if r >= self.grid.radius {
            Ok(r - self.grid.radius + OUTSIDE_MARGIN)
        } else {
            Ok(self.grid.eval1(p))
        }
    }

    pub fn eval_many(&self, points: &[Vector3<f64>]) -> Result<Vec<f64>> {
        points.iter().map(|p| self.eval(p)).collect()
    }

    /// Analytic spatial gradient; defined only strictly inside the sphere.
    pub fn grad(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        check_finite(p)?;
        if p.norm() >= self.grid.radius {
            return Err(Error::GradientOutsideDomain);
        }
        Ok(self.grid.grad_raw(p, 0))
    }

    pub fn grad_many(&self, points: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        points.iter().map(|p| self.grad(p)).collect()
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        self.grid.write_into(c, prefix);
        c.insert(&format!("{prefix}/steepness"), Payload::scalar_f64(self.steepness));
        c.insert(&format!("{prefix}/bias"), Payload::scalar_f64(self.bias_amplitude));
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        Ok(SdfField {
            grid: MultiGrid::read_from(c, prefix)?,
            steepness: c.get(&format!("{prefix}/steepness"))?.as_f64()?[0],
            bias_amplitude: c.get(&format!("{prefix}/bias"))?.as_f64()?[0],
        })
    }
}

/// Three-channel color field with the same grid structure as the SDF.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorField {
    pub grid: MultiGrid,
    /// Color returned outside the bounding sphere and composited behind
    /// transparent pixels.
    pub background: Vector3<f64>,
}

impl ColorField {
    /// Color at `p`, clamped to [0, 1]; background outside the sphere.
    pub fn eval(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(self.eval_unclamped(p)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Raw interpolant before the [0, 1] clamp; the renderer's adjoint pass
    /// needs it to gate gradients at the clamp boundary.
    pub fn eval_unclamped(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        check_finite(p)?;
        if p.norm() >= self.grid.radius {
            Ok(self.background)
        } else {
            Ok(self.grid.eval3(p))
        }
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        self.grid.write_into(c, prefix);
        c.insert(
            &format!("{prefix}/background"),
            Payload::F64 {
                dims: vec![3],
                data: vec![self.background.x, self.background.y, self.background.z],
            },
        );
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let bg = c.get(&format!("{prefix}/background"))?.as_f64()?.to_vec();
        Ok(ColorField {
            grid: MultiGrid::read_from(c, prefix)?,
            background: Vector3::new(bg[0], bg[1], bg[2]),
        })
    }
}

/// Analytic solid primitives used for ground-truth scenes and inits.
#[derive(Clone, Debug)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Torus with vertical (y) axis: `major` is the ring radius, `minor` the
    /// tube radius.
    Torus { center: Vector3<f64>, major: f64, minor: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Torus { center, major, minor } => {
                let q = p - center;
                let ring = (q.x.hypot(q.z) - major).hypot(q.y);
                ring - minor
            }
        }
    }

    /// Farthest distance from the origin to any surface point.
    pub fn extent(&self) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => center.norm() + radius,
            Primitive::Torus { center, major, minor } => center.norm() + major + minor,
        }
    }
}

/// Exact union (min) of primitive signed distances.
pub fn union_sdf(primitives: &[Primitive], p: &Vector3<f64>) -> f64 {
    primitives
        .iter()
        .map(|prim| prim.sdf(p))
        .fold(f64::INFINITY, f64::min)
}

/// Negative Gaussian blob −a·exp(−‖p‖²/(2σ²)) added to the SDF at init to
/// bias optimization toward an object at the origin.
#[derive(Clone, Copy, Debug)]
pub struct BiasBlob {
    pub amplitude: f64,
    pub sigma: f64,
}

impl Default for BiasBlob {
    fn default() -> Self {
        BiasBlob { amplitude: 0.5, sigma: 0.5 }
    }
}

impl BiasBlob {
    pub fn eval(&self, p: &Vector3<f64>) -> f64 {
        -self.amplitude * (-p.norm_squared() / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Options for building fields from analytic primitives.
#[derive(Clone, Debug)]
pub struct FieldInit {
    pub resolutions: Vec<usize>,
    pub radius: f64,
    pub steepness: f64,
    /// Present for optimization inits; ground-truth fields leave it out.
    pub bias: Option<BiasBlob>,
    pub background: Vector3<f64>,
}

impl Default for FieldInit {
    fn default() -> Self {
        FieldInit {
            resolutions: vec![16, 32, 64],
            radius: 2.0,
            steepness: 16.0,
            bias: None,
            background: Vector3::new(1.0, 1.0, 1.0),
        }
    }
}

/// Samples the union of `primitives` (plus the optional init blob) and a
/// color function onto fresh fields. The analytic signal goes into the finest
/// level; coarser levels start at zero and act as residuals during
/// optimization.
pub fn init_field(
    primitives: &[Primitive],
    color_fn: &dyn Fn(&Vector3<f64>) -> Vector3<f64>,
    opts: &FieldInit,
) -> Result<(SdfField, ColorField)> {
    if primitives.is_empty() {
        return Err(Error::EmptyInput("primitives".into()));
    }
    for prim in primitives {
        if prim.extent() > opts.radius {
            return Err(Error::PrimitiveOutOfBounds(format!(
                "primitive extent {:.3} exceeds bounding-sphere radius {:.3}",
                prim.extent(),
                opts.radius
            )));
        }
    }
    let finest = opts.resolutions.len() - 1;

    let mut sdf_grid = MultiGrid::new(1, opts.radius, &opts.resolutions);
    sdf_grid.fill(|level, p| {
        if level != finest {
            return vec![0.0];
        }
        let mut v = union_sdf(primitives, p);
        if let Some(bias) = &opts.bias {
            v += bias.eval(p);
        }
        vec![v]
    });

    let mut color_grid = MultiGrid::new(3, opts.radius, &opts.resolutions);
    color_grid.fill(|level, p| {
        if level != finest {
            return vec![0.0; 3];
        }
        let c = color_fn(p);
        vec![c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0), c.z.clamp(0.0, 1.0)]
    });

    Ok((
        SdfField {
            grid: sdf_grid,
            steepness: opts.steepness,
            bias_amplitude: opts.bias.map_or(0.0, |b| b.amplitude),
        },
        ColorField { grid: color_grid, background: opts.background },
    ))
}

/// Small perturbed-sphere SDF plus random mid-range colors, shared by
/// renderer finite-difference tests. The perturbation is gentle so opacity
/// and color clamps stay clear of their kinks under FD probing.
#[cfg(test)]
pub fn fieldinit_for_tests(rng: &mut impl rand::Rng) -> (SdfField, ColorField) {
    let mut sdf_grid = MultiGrid::new(1, 2.0, &[16]);
    sdf_grid.fill(|_, p| vec![p.norm() - 0.5 + rng.gen_range(-0.05..0.05)]);
    let mut color_grid = MultiGrid::new(3, 2.0, &[8]);
    color_grid.fill(|_, _| {
        vec![
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
        ]
    });
    (
        SdfField { grid: sdf_grid, steepness: 24.0, bias_amplitude: 0.0 },
        ColorField { grid: color_grid, background: Vector3::new(1.0, 1.0, 1.0) },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, channels: usize, resolutions: &[usize]) -> MultiGrid {
        let mut g = MultiGrid::new(channels, 2.0, resolutions);
        for level in &mut g.levels {
            for v in &mut level.values {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        g
    }

    /// Independent scalar trilinear oracle for one level, no shared code with
    /// the implementation.
    fn trilinear_oracle(level: &GridLevel, radius: f64, p: &Vector3<f64>, channels: usize, c: usize) -> f64 {
        let res = level.resolution;
        let n = res + 1;
        let h = 2.0 * radius / res as f64;
        let gx = (p.x + radius) / h;
        let gy = (p.y + radius) / h;
        let gz = (p.z + radius) / h;
        let ix = (gx.floor() as usize).min(res - 1);
        let iy = (gy.floor() as usize).min(res - 1);
        let iz = (gz.floor() as usize).min(res - 1);
        let (fx, fy, fz) = (gx - ix as f64, gy - iy as f64, gz - iz as f64);
        let at = |x: usize, y: usize, z: usize| level.values[(((z * n) + y) * n + x) * channels + c];
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(at(ix, iy, iz), at(ix + 1, iy, iz), fx);
        let c10 = lerp(at(ix, iy + 1, iz), at(ix + 1, iy + 1, iz), fx);
        let c01 = lerp(at(ix, iy, iz + 1), at(ix + 1, iy, iz + 1), fx);
        let c11 = lerp(at(ix, iy + 1, iz + 1), at(ix + 1, iy + 1, iz + 1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Random point strictly inside the sphere and away from every cell face
    /// of every level (the spatial gradient is discontinuous across faces).
    fn interior_point(rng: &mut ChaCha8Rng, grid: &MultiGrid) -> Vector3<f64> {
        'outer: loop {
            let p = Vector3::new(
                rng.gen_range(-1.1..1.1),
                rng.gen_range(-1.1..1.1),
                rng.gen_range(-1.1..1.1),
            );
            if p.norm() > 0.95 * grid.radius {
                continue;
            }
            for level in &grid.levels {
                let h = 2.0 * grid.radius / level.resolution as f64;
                for a in 0..3 {
                    let u = (p[a] + grid.radius) / h;
                    // World-space distance to the nearest cell face must
                    // clear the finite-difference step used by callers.
                    if (u - u.round()).abs() * h < 5e-4 {
                        continue 'outer;
                    }
                }
            }
            return p;
        }
    }

    fn sdf_from_grid(grid: MultiGrid) -> SdfField {
        SdfField { grid, steepness: 16.0, bias_amplitude: 0.0 }
    }

    #[test]
    fn constant_field_sums_levels() {
        let mut g = MultiGrid::new(1, 2.0, &[16, 32, 64]);
        for level in &mut g.levels {
            level.values.fill(0.5);
        }
        let f = sdf_from_grid(g);
        let v = f.eval(&Vector3::new(0.31, -0.7, 0.12)).unwrap();
        assert!((v - 1.5).abs() < 1e-12, "constant interpolant sums per level: {v}");
    }

    #[test]
    fn exact_at_shared_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_grid(&mut rng, 1, &[16, 32, 64]);
        // Corners of the coarsest level are corners of every finer level
        // (resolutions are nested multiples); pick ones inside the sphere.
        let mut checked = 0;
        for z in 0..17 {
            for y in 0..17 {
                for x in 0..17 {
                    let p = g.corner_pos(0, x, y, z);
                    if p.norm() >= 0.98 * g.radius {
                        continue;
                    }
                    let mut expect = 0.0;
                    for (li, level) in g.levels.iter().enumerate() {
                        let f = (level.resolution / 16) as usize;
                        let n = level.resolution + 1;
                        expect += level.values[((z * f) * n + y * f) * n + x * f];
                        let _ = li;
                    }
                    let got = g.eval1(&p);
                    assert!(
                        (got - expect).abs() < 1e-12,
                        "corner ({x},{y},{z}): {got} vs {expect}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 500, "enough interior corners exercised: {checked}");
    }

    #[test]
    fn matches_independent_trilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_grid(&mut rng, 1, &[16, 32, 64]);
        for _ in 0..200 {
            let p = interior_point(&mut rng, &g);
            let expect: f64 = g
                .levels
                .iter()
                .map(|l| trilinear_oracle(l, g.radius, &p, 1, 0))
                .sum();
            let got = g.eval1(&p);
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn linear_ramp_has_unit_gradient() {
        let mut g = MultiGrid::new(1, 2.0, &[16]);
        g.fill(|_, p| vec![p.x]);
        let f = sdf_from_grid(g);
        for p in [
            Vector3::new(0.2, 0.3, -0.4),
            Vector3::new(-0.9, 0.01, 0.77),
            Vector3::new(0.0, 0.0, 0.0),
        ] {
            let grad = f.grad(&p).unwrap();
            assert!((grad - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let mut g = MultiGrid::new(1, 2.0, &[16, 32]);
        for level in &mut g.levels {
            level.values.fill(0.25);
        }
        let f = sdf_from_grid(g);
        let grad = f.grad(&Vector3::new(0.4, -0.2, 0.6)).unwrap();
        assert!(grad.norm() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_grid(&mut rng, 1, &[16, 32, 64]);
        let f = sdf_from_grid(g);
        let h = 1e-4;
        for _ in 0..1000 {
            let p = interior_point(&mut rng, &f.grid);
            let analytic = f.grad(&p).unwrap();
            let mut fd = Vector3::zeros();
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                fd[a] = (f.eval(&hi).unwrap() - f.eval(&lo).unwrap()) / (2.0 * h);
            }
            let denom = analytic.norm().max(fd.norm()).max(1e-9);
            assert!(
                (analytic - fd).norm() / denom < 1e-3,
                "at {p:?}: {analytic:?} vs {fd:?}"
            );
        }
    }

    #[test]
    fn scatter_value_is_adjoint_of_eval() {
        // ⟨scatter(p, adj), δparams⟩ must equal adj · δ(eval) for a random
        // parameter perturbation — checked exactly by linearity.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = random_grid(&mut rng, 1, &[8, 16]);
        let p = interior_point(&mut rng, &g);
        let adj = 0.7;
        let mut grad = vec![0.0; g.param_len()];
        g.scatter_value(&p, 0, adj, &mut grad);

        let delta: Vec<f64> = (0..g.param_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inner: f64 = grad.iter().zip(&delta).map(|(a, b)| a * b).sum();

        let mut shifted = g.clone();
        let eps = 1e-6;
        let base = shifted.params_flat();
        let new: Vec<f64> = base.iter().zip(&delta).map(|(v, d)| v + eps * d).collect();
        shifted.set_params_flat(&new).unwrap();
        let fd = adj * (shifted.eval1(&p) - g.eval1(&p)) / eps;
        assert!((inner - fd).abs() < 1e-6, "{inner} vs {fd}");
    }

    #[test]
    fn scatter_spatial_grad_is_adjoint_of_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let g = random_grid(&mut rng, 1, &[8, 16]);
        let p = interior_point(&mut rng, &g);
        let adj = Vector3::new(0.3, -0.5, 0.8);
        let mut grad = vec![0.0; g.param_len()];
        g.scatter_spatial_grad(&p, 0, &adj, &mut grad);

        let delta: Vec<f64> = (0..g.param_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inner: f64 = grad.iter().zip(&delta).map(|(a, b)| a * b).sum();

        let mut shifted = g.clone();
        let eps = 1e-6;
        let base = shifted.params_flat();
        let new: Vec<f64> = base.iter().zip(&delta).map(|(v, d)| v + eps * d).collect();
        shifted.set_params_flat(&new).unwrap();
        let fd = adj.dot(&(shifted.grad_raw(&p, 0) - g.grad_raw(&p, 0))) / eps;
        assert!((inner - fd).abs() < 1e-6, "{inner} vs {fd}");
    }

    #[test]
    fn sphere_init_matches_analytic_distance() {
        let prims = [Primitive::Sphere { center: Vector3::zeros(), radius: 0.8 }];
        let (sdf, _) = init_field(&prims, &|_| Vector3::new(0.5, 0.5, 0.5), &FieldInit::default()).unwrap();
        // Finest level is 64 over [−2,2]: cell diagonal = √3 · 4/64.
        let diag = 3.0f64.sqrt() * 4.0 / 64.0;
        let at_origin = sdf.eval(&Vector3::zeros()).unwrap();
        assert!((at_origin + 0.8).abs() < diag, "{at_origin}");
        let at_surface = sdf.eval(&Vector3::new(0.8, 0.0, 0.0)).unwrap();
        assert!(at_surface.abs() < diag, "{at_surface}");
    }

    #[test]
    fn torus_init_zero_level_near_analytic_surface() {
        let prims = [Primitive::Torus { center: Vector3::zeros(), major: 0.8, minor: 0.3 }];
        let (sdf, _) = init_field(&prims, &|_| Vector3::new(0.5, 0.5, 0.5), &FieldInit::default()).unwrap();
        let diag = 3.0f64.sqrt() * 4.0 / 64.0;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // Find approximate zero-level samples by bisecting between inside and
        // outside points, then check each against the analytic SDF.
        let mut found = 0;
        while found < 200 {
            let az = rng.gen_range(0.0..std::f64::consts::TAU);
            let inside = Vector3::new(0.8 * az.sin(), 0.0, 0.8 * az.cos());
            let outside = inside * 2.0;
            let mut lo = inside;
            let mut hi = outside;
            for _ in 0..60 {
                let mid = (lo + hi) / 2.0;
                if sdf.eval(&mid).unwrap() < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let surf = (lo + hi) / 2.0;
            let analytic = prims[0].sdf(&surf);
            assert!(analytic.abs() < diag, "zero-level point off surface by {analytic}");
            found += 1;
        }
    }

    #[test]
    fn primitive_signs_agree_with_analytic() {
        let prims = [
            Primitive::Sphere { center: Vector3::new(0.2, 0.0, 0.0), radius: 0.5 },
            Primitive::Sphere { center: Vector3::new(-0.3, 0.1, 0.2), radius: 0.4 },
        ];
        let (sdf, _) = init_field(&prims, &|_| Vector3::new(0.5, 0.5, 0.5), &FieldInit::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut checked = 0;
        while checked < 1000 {
            let p = Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            if p.norm() >= 1.9 {
                continue;
            }
            let analytic = union_sdf(&prims, &p);
            // Skip the thin interpolation-error band around the surface.
            if analytic.abs() < 5e-3 {
                continue;
            }
            let v = sdf.eval(&p).unwrap();
            assert_eq!(v > 0.0, analytic > 0.0, "sign differs at {p:?}: {v} vs {analytic}");
            checked += 1;
        }
    }

    #[test]
    fn bias_blob_lowers_center() {
        let prims = [Primitive::Sphere { center: Vector3::zeros(), radius: 0.3 }];
        let opts = FieldInit { bias: Some(BiasBlob::default()), ..FieldInit::default() };
        let (sdf, _) = init_field(&prims, &|_| Vector3::new(0.5, 0.5, 0.5), &opts).unwrap();
        let v = sdf.eval(&Vector3::zeros()).unwrap();
        assert!((v + 0.8).abs() < 0.05, "sphere −0.3 plus blob −0.5 at origin: {v}");
        assert!((sdf.bias_amplitude - 0.5).abs() < 1e-12);
    }

    #[test]
    fn outside_sphere_is_positive_background() {
        let mut g = MultiGrid::new(1, 2.0, &[16]);
        g.fill(|_, _| vec![-5.0]); // hostile interior values
        let f = sdf_from_grid(g);
        let v = f.eval(&Vector3::new(0.0, 2.5, 0.0)).unwrap();
        assert!((v - (0.5 + OUTSIDE_MARGIN)).abs() < 1e-12);

        let c = ColorField {
            grid: MultiGrid::new(3, 2.0, &[16]),
            background: Vector3::new(1.0, 1.0, 1.0),
        };
        assert_eq!(c.eval(&Vector3::new(3.0, 0.0, 0.0)).unwrap(), Vector3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn query_errors() {
        let f = sdf_from_grid(MultiGrid::new(1, 2.0, &[16]));
        let err = f.eval(&Vector3::new(f64::NAN, 0.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("invalid query point"));
        let err = f.grad(&Vector3::new(0.0, 0.0, 2.0)).unwrap_err();
        assert!(err.to_string().contains("gradient outside domain"));
    }

    #[test]
    fn oversized_primitive_rejected() {
        let prims = [Primitive::Sphere { center: Vector3::new(1.5, 0.0, 0.0), radius: 1.0 }];
        assert!(init_field(&prims, &|_| Vector3::zeros(), &FieldInit::default()).is_err());
    }

    #[test]
    fn color_clamped_to_unit_interval() {
        let mut g = MultiGrid::new(3, 2.0, &[8]);
        g.fill(|_, _| vec![1.7, -0.4, 0.5]);
        let c = ColorField { grid: g, background: Vector3::zeros() };
        let v = c.eval(&Vector3::new(0.1, 0.1, 0.1)).unwrap();
        assert_eq!(v, Vector3::new(1.0, 0.0, 0.5));
    }

    #[test]
    fn container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f = sdf_from_grid(random_grid(&mut rng, 1, &[8, 16]));
        let mut c = Container::new();
        f.write_into(&mut c, "sdf");
        let back = SdfField::read_from(&c, "sdf").unwrap();
        assert_eq!(f, back);
    }
}
