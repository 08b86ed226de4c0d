//! Evaluation against the known ground truth: reference-view PSNR, held-out
//! PSNR / mask IoU, and symmetric Chamfer distance between the extracted
//! mesh and the analytic surface.

use crate::error::{Error, Result};
use crate::img::{mask_iou, psnr};
use crate::pipeline::config::ExperimentConfig;
use crate::pipeline::SceneState;
use crate::render::{RenderMode, RenderOptions};
use crate::scenes::{fixed_intrinsics_camera, render_gt, surface_samples, GroundTruth};
use crate::camera::Camera;
use crate::losses::ReferencePack;
use crate::tetra::{init_grid_from_field, marching_tetrahedra, TriMesh};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Point count per direction of the Chamfer estimate.
const CHAMFER_SAMPLES: usize = 2000;
/// Fixed stream for metric sampling, independent of the training stream so
/// evaluation never perturbs a run.
const METRIC_SEED: u64 = 0x6d65_7472_6963_73;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr_reference: f64,
    pub psnr_held_out: f64,
    pub iou_held_out: f64,
    pub chamfer: f64,
}

/// Eight views disjoint from both the reference pose and the pose-bucket
/// centers the priors were built from.
pub fn held_out_cameras(width: usize, height: usize) -> Vec<Camera> {
    (0..8)
        .map(|k| fixed_intrinsics_camera(10.0 + 45.0 * k as f64, 25.0, width, height))
        .collect()
}

/// Squared distance from `p` to triangle `abc` (closest-feature walk over
/// vertices, edges, and face).
pub fn point_triangle_dist2(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm_squared();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm_squared();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm_squared();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm_squared();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm_squared();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * w).norm_squared();
    }
    let denom = va + vb + vc;
    if denom <= 0.0 {
        // Degenerate (zero-area) triangle: fall back to its vertices.
        return ap.norm_squared().min(bp.norm_squared()).min(cp.norm_squared());
    }
    let v = vb / denom;
    let w = vc / denom;
    (ap - ab * v - ac * w).norm_squared()
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh_surface(mesh: &TriMesh, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        let (a, b, c) =
            (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let r = rng.gen_range(0.0..total);
            let ti = cumulative.partition_point(|&area| area < r).min(mesh.triangles.len() - 1);
            let t = mesh.triangles[ti];
            let (a, b, c) =
                (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect()
}

/// Symmetric Chamfer distance: mesh samples read the analytic distance
/// field exactly; analytic surface samples scan the triangle set.
pub fn chamfer_distance(
    mesh: &TriMesh,
    gt: &GroundTruth,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyInput("mesh has no triangles".into()));
    }
    let on_mesh = sample_mesh_surface(mesh, samples, rng);
    if on_mesh.is_empty() {
        return Err(Error::EmptyInput("mesh has zero surface area".into()));
    }
    let mesh_to_gt: f64 =
        on_mesh.iter().map(|p| gt.distance(p).abs()).sum::<f64>() / on_mesh.len() as f64;

    let on_gt = surface_samples(gt, samples, rng);
    let gt_to_mesh: f64 = on_gt
        .par_iter()
        .map(|p| {
            mesh.triangles
                .iter()
                .map(|t| {
                    point_triangle_dist2(
                        p,
                        &mesh.vertices[t[0]],
                        &mesh.vertices[t[1]],
                        &mesh.vertices[t[2]],
                    )
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum::<f64>()
        / on_gt.len() as f64;

    Ok(0.5 * (mesh_to_gt + gt_to_mesh))
}

/// Scores a state against the ground truth: PSNR at the reference view,
/// PSNR/IoU averaged over the held-out ring, and Chamfer distance of the
/// extracted surface.
pub fn compute_metrics(
    state: &SceneState,
    gt: &GroundTruth,
    pack: &ReferencePack,
    cfg: &ExperimentConfig,
) -> Result<Metrics> {
    let renderer = state.renderer();
    let opts = RenderOptions {
        samples_per_ray: cfg.render.samples_per_ray,
        mode: RenderMode::Rgb,
        ..RenderOptions::default()
    };

    let ref_out = renderer.render(&pack.camera, &opts)?;
    let psnr_reference = psnr(&ref_out.rgb, &pack.rgb);

    let mut psnr_sum = 0.0;
    let mut iou_sum = 0.0;
    let held_out = held_out_cameras(cfg.render.width, cfg.render.height);
    for cam in &held_out {
        let ours = renderer.render(cam, &opts)?;
        let truth = render_gt(gt, cam, cfg.render.samples_per_ray, RenderMode::Rgb)?;
        psnr_sum += psnr(&ours.rgb, &truth.rgb);
        iou_sum += mask_iou(&ours.mask, &truth.mask);
    }
    let n = held_out.len() as f64;

    let extracted;
    let mesh = match renderer.mesh() {
        Some(m) => m,
        None => {
            let grid = init_grid_from_field(&state.sdf, cfg.stage.grid_resolution)?;
            extracted = marching_tetrahedra(&grid);
            &extracted
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(METRIC_SEED);
    let chamfer = chamfer_distance(mesh, gt, CHAMFER_SAMPLES, &mut rng)?;

    Ok(Metrics {
        psnr_reference,
        psnr_held_out: psnr_sum / n,
        iou_held_out: iou_sum / n,
        chamfer,
    })
}
