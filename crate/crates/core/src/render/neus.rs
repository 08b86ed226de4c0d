//! Volume rendering of SDF + color fields with SDF-derived opacity.
//!
//! Per ray, the signed distance is sampled at evenly spaced section points
//! clipped to the bounding sphere; consecutive samples convert to opacity via
//! the logistic CDF Φ_s: α_i = max((Φ_s(f_i) − Φ_s(f_{i+1})) / Φ_s(f_i), 0),
//! which concentrates compositing weight where the SDF crosses zero from
//! outside to inside. Color and normals are evaluated at section midpoints
//! (strictly inside the sphere, where the spatial gradient is defined) and
//! alpha-composited; residual transmittance blends in the background color.
//!
//! `render_neus_vjp` is the exact hand-written reverse pass of the same
//! computation: it backpropagates image-space adjoints through the mode
//! shading, normalization, compositing recurrence, logistic opacity, and
//! trilinear interpolation into every grid parameter.

use super::{lambert_shade, parallel_accumulate, RenderAdjoint, RenderMode, RenderOptions, RenderOutput, LAMBERT_AMBIENT};
use crate::camera::{Camera, Ray};
use crate::error::Result;
use crate::fields::{ColorField, SdfField};
use nalgebra::Vector3;
use rayon::prelude::*;

/// Transmittance below which a ray is treated as fully absorbed.
const T_CUTOFF: f64 = 1e-12;
/// Guard for normalizing composite quantities.
const NORM_EPS: f64 = 1e-8;
/// Rays are clipped to a sphere very slightly inside the field's bounding
/// sphere so every section midpoint admits a spatial gradient.
const CLIP_INSET: f64 = 1e-6;

/// Gradients of ⟨adjoint, render⟩ with respect to all field parameters,
/// flattened per field (level-major, matching `MultiGrid::params_flat`).
#[derive(Clone, Debug)]
pub struct NeusGradients {
    pub sdf: Vec<f64>,
    pub color: Vec<f64>,
}

/// Logistic CDF and its derivative, argument clamped so hostile SDF values
/// can never produce 0/0 or inf in the opacity ratio. The derivative is the
/// numerically stable product σ(x)·σ(−x).
fn phi_pair(x: f64) -> (f64, f64) {
    let xc = x.clamp(-700.0, 700.0);
    let p = 1.0 / (1.0 + (-xc).exp());
    let q = 1.0 / (1.0 + xc.exp());
    (p, p * q)
}

/// Entry/exit distances of a unit-direction ray against the clipped bounding
/// sphere, intersected with [near, far]; `None` when the ray misses.
fn clip_to_sphere(ray: &Ray, radius: f64, near: f64, far: f64) -> Option<(f64, f64)> {
    let r = radius - CLIP_INSET;
    let o = ray.origin.coords;
    let b = o.dot(&ray.dir);
    let disc = b * b - (o.norm_squared() - r * r);
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq).max(near);
    let t1 = (-b + sq).min(far);
    if t1 <= t0 {
        None
    } else {
        Some((t0, t1))
    }
}

/// Everything the reverse pass needs about one ray's forward computation.
struct RayTrace {
    /// Section distances t_0..t_N (N+1 values).
    sections: Vec<f64>,
    /// SDF values at sections.
    f: Vec<f64>,
    /// Opacities α_i, i < N (truncated at absorption cutoff).
    alpha: Vec<f64>,
    /// Transmittance before each processed sample.
    trans: Vec<f64>,
    /// Compositing weights w_i = T_i α_i.
    weights: Vec<f64>,
    /// Midpoint positions of processed samples.
    midpoints: Vec<Vector3<f64>>,
    /// Unclamped colors at midpoints.
    color_raw: Vec<Vector3<f64>>,
    /// Clamped colors at midpoints.
    color: Vec<Vector3<f64>>,
    /// Raw SDF spatial gradients at midpoints.
    grad: Vec<Vector3<f64>>,
    /// Normalized gradients (zero where the raw norm is degenerate).
    normal: Vec<Vector3<f64>>,
    /// Residual transmittance after the last processed sample.
    trans_final: f64,
}

/// Composited per-pixel quantities prior to mode shading.
struct PixelComposite {
    mask: f64,
    /// Σ w_i t_i (unnormalized depth).
    depth_sum: f64,
    /// Foreground albedo Σ w_i c_i, before the background term.
    fg_color: Vector3<f64>,
    /// Unnormalized composite normal Σ w_i n_i.
    normal_sum: Vector3<f64>,
}

fn trace_ray(
    sdf: &SdfField,
    color: &ColorField,
    ray: &Ray,
    opts: &RenderOptions,
) -> Option<RayTrace> {
    let (t0, t1) = clip_to_sphere(ray, sdf.radius(), opts.near, opts.far)?;
    let n = opts.samples_per_ray;
    let step = (t1 - t0) / n as f64;
    let s = sdf.steepness;

    let mut sections = Vec::with_capacity(n + 1);
    let mut f = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = t0 + step * i as f64;
        sections.push(t);
        // Clipped sections are inside the bounding sphere, so eval takes the
        // grid path; unwrap is safe because ray points are finite.
        f.push(sdf.eval(&ray.at(t).coords).expect("finite ray point"));
    }

    let mut tr = RayTrace {
        sections,
        f,
        alpha: Vec::with_capacity(n),
        trans: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        midpoints: Vec::with_capacity(n),
        color_raw: Vec::with_capacity(n),
        color: Vec::with_capacity(n),
        grad: Vec::with_capacity(n),
        normal: Vec::with_capacity(n),
        trans_final: 1.0,
    };

    let mut trans = 1.0;
    for i in 0..n {
        let (phi_i, _) = phi_pair(s * tr.f[i]);
        let (phi_next, _) = phi_pair(s * tr.f[i + 1]);
        let alpha = (1.0 - phi_next / phi_i).max(0.0);
        let w = trans * alpha;

        let mid = ray.at((tr.sections[i] + tr.sections[i + 1]) / 2.0).coords;
        let c_raw = color.eval_unclamped(&mid).expect("finite midpoint");
        let g = sdf.grad(&mid).expect("midpoint inside sphere");
        let gn = g.norm();
        let normal = if gn > NORM_EPS { g / gn } else { Vector3::zeros() };

        tr.alpha.push(alpha);
        tr.trans.push(trans);
        tr.weights.push(w);
        tr.midpoints.push(mid);
        tr.color_raw.push(c_raw);
        tr.color.push(c_raw.map(|v| v.clamp(0.0, 1.0)));
        tr.grad.push(g);
        tr.normal.push(normal);

        trans *= 1.0 - alpha;
        if trans < T_CUTOFF {
            break;
        }
    }
    tr.trans_final = trans;
    Some(tr)
}

fn composite(tr: &RayTrace) -> PixelComposite {
    let mut mask = 0.0;
    let mut depth_sum = 0.0;
    let mut fg_color = Vector3::zeros();
    let mut normal_sum = Vector3::zeros();
    for i in 0..tr.weights.len() {
        let w = tr.weights[i];
        let t_mid = (tr.sections[i] + tr.sections[i + 1]) / 2.0;
        mask += w;
        depth_sum += w * t_mid;
        fg_color += w * tr.color[i];
        normal_sum += w * tr.normal[i];
    }
    PixelComposite { mask, depth_sum, fg_color, normal_sum }
}

/// Final per-pixel buffers from composited quantities. The background is
/// composited unshaded; only foreground color receives Lambertian shading.
fn shade(
    pc: &PixelComposite,
    background: &Vector3<f64>,
    mode: &RenderMode,
) -> (Vector3<f64>, f64, Vector3<f64>, f64) {
    let vn = pc.normal_sum.norm();
    let normal = if vn > NORM_EPS { pc.normal_sum / vn } else { Vector3::zeros() };
    let depth = pc.depth_sum / pc.mask.max(NORM_EPS);
    let rgb = match mode {
        RenderMode::Rgb => pc.fg_color + (1.0 - pc.mask) * background,
        RenderMode::NormalMap => (normal + Vector3::new(1.0, 1.0, 1.0)) / 2.0,
        RenderMode::Lambertian { light_dir } => {
            pc.fg_color * lambert_shade(&normal, light_dir) + (1.0 - pc.mask) * background
        }
    };
    (rgb, depth, normal, pc.mask)
}

pub fn render_neus(
    sdf: &SdfField,
    color: &ColorField,
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    opts.validate()?;
    let rays = camera.generate_rays()?;
    let (w, h) = (camera.width, camera.height);

    let pixels: Vec<(Vector3<f64>, f64, Vector3<f64>, f64)> = rays
        .par_iter()
        .map(|ray| {
            let pc = match trace_ray(sdf, color, ray, opts) {
                Some(tr) => composite(&tr),
                None => PixelComposite {
                    mask: 0.0,
                    depth_sum: 0.0,
                    fg_color: Vector3::zeros(),
                    normal_sum: Vector3::zeros(),
                },
            };
            shade(&pc, &color.background, &opts.mode)
        })
        .collect();

    let mut out = RenderOutput::new(w, h);
    for (i, (rgb, depth, normal, mask)) in pixels.into_iter().enumerate() {
        let (x, y) = (i % w, i / w);
        for c in 0..3 {
            out.rgb.set(x, y, c, rgb[c]);
            out.normal.set(x, y, c, normal[c]);
        }
        out.depth.set(x, y, 0, depth);
        out.mask.set(x, y, 0, mask);
    }
    Ok(out)
}

pub fn render_neus_vjp(
    sdf: &SdfField,
    color: &ColorField,
    camera: &Camera,
    opts: &RenderOptions,
    adjoint: &RenderAdjoint,
) -> Result<NeusGradients> {
    opts.validate()?;
    adjoint.check_shape(camera.width, camera.height)?;
    let rays = camera.generate_rays()?;
    let background = color.background;

    let sdf_len = sdf.grid.param_len();
    let color_len = color.grid.param_len();

    let grads = parallel_accumulate(
        rays.len(),
        8,
        || NeusGradients { sdf: vec![0.0; sdf_len], color: vec![0.0; color_len] },
        |acc, pix| {
            let ray = &rays[pix];
            let (x, y) = (pix % camera.width, pix / camera.width);
            let Some(tr) = trace_ray(sdf, color, ray, opts) else {
                return; // no sample contributes; background pixels carry no gradient
            };
            let pc = composite(&tr);

            let a_rgb = Vector3::new(
                adjoint.rgb.get(x, y, 0),
                adjoint.rgb.get(x, y, 1),
                adjoint.rgb.get(x, y, 2),
            );
            let a_depth = adjoint.depth.get(x, y, 0);
            let a_normal_buf = Vector3::new(
                adjoint.normal.get(x, y, 0),
                adjoint.normal.get(x, y, 1),
                adjoint.normal.get(x, y, 2),
            );
            let a_mask = adjoint.mask.get(x, y, 0);

            backprop_ray(sdf, color, ray, &tr, &pc, opts, &background,
                (a_rgb, a_depth, a_normal_buf, a_mask), acc);
        },
        |total, part| {
            for (a, b) in total.sdf.iter_mut().zip(&part.sdf) {
                *a += b;
            }
            for (a, b) in total.color.iter_mut().zip(&part.color) {
                *a += b;
            }
        },
    );
    Ok(grads)
}

/// Reverse pass for one ray. `adjoints` are (rgb, depth, normal, mask)
/// gradients at this pixel.
#[allow(clippy::too_many_arguments)]
fn backprop_ray(
    sdf: &SdfField,
    color: &ColorField,
    ray: &Ray,
    tr: &RayTrace,
    pc: &PixelComposite,
    opts: &RenderOptions,
    background: &Vector3<f64>,
    adjoints: (Vector3<f64>, f64, Vector3<f64>, f64),
    acc: &mut NeusGradients,
) {
    let (a_rgb, a_depth, a_normal_buf, a_mask) = adjoints;

    // --- Mode shading: adjoints w.r.t. foreground color, composite unit
    // normal, and (for modes compositing the background) the mask.
    let vn = pc.normal_sum.norm();
    let unit_normal = if vn > NORM_EPS { pc.normal_sum / vn } else { Vector3::zeros() };
    let (a_fg, a_unit_normal, a_mask_bg) = match &opts.mode {
        RenderMode::Rgb => (a_rgb, a_normal_buf, -a_rgb.dot(background)),
        RenderMode::NormalMap => (Vector3::zeros(), a_normal_buf + a_rgb / 2.0, 0.0),
        RenderMode::Lambertian { light_dir } => {
            let shade_val = lambert_shade(&unit_normal, light_dir);
            let mut an = a_normal_buf;
            if unit_normal.dot(light_dir) > 0.0 {
                an += (1.0 - LAMBERT_AMBIENT) * a_rgb.dot(&pc.fg_color) * light_dir;
            }
            (a_rgb * shade_val, an, -a_rgb.dot(background))
        }
    };

    // --- Normalization of the composite normal.
    let a_normal_sum = if vn > NORM_EPS {
        (a_unit_normal - unit_normal * unit_normal.dot(&a_unit_normal)) / vn
    } else {
        Vector3::zeros()
    };

    // --- Depth normalization D = S / max(M, ε).
    let m_eff = pc.mask.max(NORM_EPS);
    let a_depth_sum = a_depth / m_eff;
    let a_mask_from_depth =
        if pc.mask > NORM_EPS { -a_depth * pc.depth_sum / (m_eff * m_eff) } else { 0.0 };

    let a_mask_eff = a_mask + a_mask_from_depth + a_mask_bg;

    // --- Per-sample weight adjoints and parameter scatters.
    let count = tr.weights.len();
    let mut a_weights = vec![0.0; count];
    for i in 0..count {
        let t_mid = (tr.sections[i] + tr.sections[i + 1]) / 2.0;
        a_weights[i] = a_fg.dot(&tr.color[i])
            + a_mask_eff
            + a_depth_sum * t_mid
            + a_normal_sum.dot(&tr.normal[i]);

        let w = tr.weights[i];
        if w != 0.0 {
            // Color chain: clamp gates each channel.
            for c in 0..3 {
                let raw = tr.color_raw[i][c];
                if raw > 0.0 && raw < 1.0 {
                    color.grid.scatter_value(&tr.midpoints[i], c, w * a_fg[c], &mut acc.color);
                }
            }
            // Normal chain: through normalize(∇f) into the SDF grid.
            let gn = tr.grad[i].norm();
            if gn > NORM_EPS {
                let a_n = w * a_normal_sum;
                let a_g = (a_n - tr.normal[i] * tr.normal[i].dot(&a_n)) / gn;
                sdf.grid.scatter_spatial_grad(&tr.midpoints[i], 0, &a_g, &mut acc.sdf);
            }
        }
    }

    // --- Compositing recurrence, reverse scan.
    // w_i = T_i α_i, T_{i+1} = T_i (1 − α_i).
    let s = sdf.steepness;
    let mut a_f = vec![0.0; tr.f.len()];
    let mut a_trans = 0.0; // dL/dT_{i+1}, rolling
    for i in (0..count).rev() {
        let a_alpha = (a_weights[i] - a_trans) * tr.trans[i];
        a_trans = a_weights[i] * tr.alpha[i] + a_trans * (1.0 - tr.alpha[i]);

        // α_i = max(1 − Φ(f_{i+1})/Φ(f_i), 0); zero branch has zero gradient.
        if tr.alpha[i] > 0.0 {
            let (phi_i, dphi_i) = phi_pair(s * tr.f[i]);
            let (phi_next, dphi_next) = phi_pair(s * tr.f[i + 1]);
            a_f[i] += a_alpha * s * phi_next / (phi_i * phi_i) * dphi_i;
            a_f[i + 1] += a_alpha * (-s * dphi_next / phi_i);
        }
    }

    // --- SDF value chain at section points.
    for (i, &af) in a_f.iter().enumerate() {
        if af != 0.0 {
            sdf.grid.scatter_value(&ray.at(tr.sections[i]).coords, 0, af, &mut acc.sdf);
        }
    }
}
