//! Bundled ground-truth toy scenes: analytic shapes with a banded color
//! texture, crisp reference renders, surface samples for geometric metrics,
//! and the prior bank distilled from ground-truth views.
//!
//! Everything an optimization run consumes as "external knowledge" is built
//! here, from closed-form primitives — so every downstream result has an
//! oracle.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::fields::{init_field, union_sdf, ColorField, FieldInit, Primitive, SdfField};
use crate::losses::ReferencePack;
use crate::priors::{view_bucket, GaussianMixturePrior, Mixture, MixtureComponent, UNCOND};
use crate::render::neus::render_neus;
use crate::render::{RenderMode, RenderOptions, RenderOutput};
use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reference view shared by all scenes: azimuth 0°, elevation 15°,
/// distance 3.3, vertical FOV 20°.
pub const REF_AZIMUTH_DEG: f64 = 0.0;
pub const REF_ELEVATION_DEG: f64 = 15.0;
pub const REF_DISTANCE: f64 = 3.3;
pub const REF_FOV_DEG: f64 = 20.0;

/// Logistic steepness for ground-truth renders (near-binary masks).
const GT_STEEPNESS: f64 = 256.0;

/// The three bundled scenes. `Asym` is a sphere with an off-axis bump, used
/// by the view-prior ablation: without pose conditioning nothing pins the
/// bump's azimuth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyScene {
    Sphere,
    Torus,
    Asym,
}

impl ToyScene {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(ToyScene::Sphere),
            "torus" => Ok(ToyScene::Torus),
            "asym" => Ok(ToyScene::Asym),
            other => Err(Error::Config(format!(
                "unknown scene '{other}' (expected sphere, torus, or asym)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyScene::Sphere => "sphere",
            ToyScene::Torus => "torus",
            ToyScene::Asym => "asym",
        }
    }

    pub fn primitives(&self) -> Vec<Primitive> {
        match self {
            ToyScene::Sphere => {
                vec![Primitive::Sphere { center: Vector3::zeros(), radius: 0.45 }]
            }
            ToyScene::Torus => {
                vec![Primitive::Torus { center: Vector3::zeros(), major: 0.35, minor: 0.12 }]
            }
            ToyScene::Asym => vec![
                Primitive::Sphere { center: Vector3::zeros(), radius: 0.4 },
                Primitive::Sphere { center: Vector3::new(0.30, 0.0, 0.20), radius: 0.15 },
            ],
        }
    }
}

/// Smooth banded test texture, range [0.2, 0.8] per channel. Band widths are
/// kept a few pixels wide at the working render resolution so that scoring
/// tolerates the pixel-scale registration error a desk-scale reconstruction
/// necessarily carries.
pub fn banded_color(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 + 0.3 * (3.0 * p.x + p.y).sin(),
        0.5 + 0.3 * (2.5 * p.y + 1.5 * p.z).sin(),
        0.5 + 0.3 * (3.5 * p.z + 2.0 * p.x).sin(),
    )
}

/// Analytic scene sampled onto crisp fields, plus its primitive list for
/// exact distance queries.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub scene: ToyScene,
    pub sdf: SdfField,
    pub color: ColorField,
    pub primitives: Vec<Primitive>,
}

pub fn ground_truth(scene: ToyScene) -> Result<GroundTruth> {
    let primitives = scene.primitives();
    let opts = FieldInit {
        resolutions: vec![64],
        steepness: GT_STEEPNESS,
        ..FieldInit::default()
    };
    let (sdf, color) = init_field(&primitives, &banded_color, &opts)?;
    Ok(GroundTruth { scene, sdf, color, primitives })
}

impl GroundTruth {
    /// Exact signed distance to the scene surface (union of primitives).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        union_sdf(&self.primitives, p)
    }
}

pub fn reference_camera(width: usize, height: usize) -> Camera {
    Camera::orbit(
        Point3::origin(),
        REF_AZIMUTH_DEG,
        REF_ELEVATION_DEG,
        REF_DISTANCE,
        REF_FOV_DEG,
        width,
        height,
    )
}

/// Orbit camera with the fixed reference intrinsics at an arbitrary pose.
pub fn fixed_intrinsics_camera(az: f64, el: f64, width: usize, height: usize) -> Camera {
    Camera::orbit(Point3::origin(), az, el, REF_DISTANCE, REF_FOV_DEG, width, height)
}

/// One camera per view bucket (8 azimuth bins × 2 elevation bins), at the
/// bin centers, fixed intrinsics. These are the poses the texture stage
/// renders its bootstrap dataset from.
pub fn bucket_cameras(width: usize, height: usize) -> Vec<Camera> {
    let mut cams = Vec::with_capacity(16);
    for el in [10.0, 35.0] {
        for k in 0..8 {
            let az = 22.5 + 45.0 * k as f64;
            cams.push(fixed_intrinsics_camera(az, el, width, height));
        }
    }
    cams
}

pub fn gt_render_options(samples_per_ray: usize, mode: RenderMode) -> RenderOptions {
    RenderOptions { samples_per_ray, mode, ..RenderOptions::default() }
}

pub fn render_gt(
    gt: &GroundTruth,
    camera: &Camera,
    samples_per_ray: usize,
    mode: RenderMode,
) -> Result<RenderOutput> {
    render_neus(&gt.sdf, &gt.color, camera, &gt_render_options(samples_per_ray, mode))
}

/// Renders the ground truth at the reference view and conditions the buffers
/// into a valid supervision pack: mask binarized at ½, depth and normals
/// zeroed outside it, normals re-normalized inside (pixels whose composite
/// normal degenerates are dropped from the mask).
pub fn render_reference_pack(
    gt: &GroundTruth,
    width: usize,
    height: usize,
    samples_per_ray: usize,
) -> Result<ReferencePack> {
    let camera = reference_camera(width, height);
    let out = render_gt(gt, &camera, samples_per_ray, RenderMode::Rgb)?;
    let mut mask = out.mask.clone();
    let mut depth = out.depth.clone();
    let mut normal = out.normal.clone();
    for y in 0..height {
        for x in 0..width {
            let mut inside = mask.get(x, y, 0) >= 0.5;
            if inside {
                let n = normal.pixel(x, y);
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len < 1e-6 {
                    inside = false;
                } else {
                    for c in 0..3 {
                        let v = normal.get(x, y, c) / len;
                        normal.set(x, y, c, v);
                    }
                }
            }
            mask.set(x, y, 0, f64::from(inside));
            if !inside {
                depth.set(x, y, 0, 0.0);
                for c in 0..3 {
                    normal.set(x, y, c, 0.0);
                }
            }
        }
    }
    let pack = ReferencePack { rgb: out.rgb, mask, depth, normal, camera };
    pack.validate()?;
    Ok(pack)
}

const TEXT_PRIOR_VIEWS: usize = 6;
const TEXT_PRIOR_GAMMA: f64 = 0.15;
const VIEW_PRIOR_GAMMA: f64 = 0.05;
/// Width of the text-view components inside the unconditional marginal.
const UNCOND_NEAR_GAMMA: f64 = 0.3;
/// Width and weight of the broad mid-gray component of the marginal.
const UNCOND_BROAD_GAMMA: f64 = 1.0;
const UNCOND_BROAD_WEIGHT: f64 = 0.3;

/// Builds the full prior bank from ground-truth renders:
///
/// * `uncond` — the class marginal: every text-view component (both
///   modalities, widened) plus one broad mid-gray Gaussian. Keeping the
///   unconditional model close to the conditionals is what makes large
///   guidance scales extrapolate sensibly instead of exploding;
/// * `text:rgb` / `text:normal` — a few orbit views as mixture components
///   (class-level appearance knowledge, pose-agnostic);
/// * `view:rgb:*` / `view:normal:*` — one component per view bucket
///   (pose-conditioned appearance knowledge).
pub fn build_prior_bundle(
    gt: &GroundTruth,
    width: usize,
    height: usize,
    samples_per_ray: usize,
) -> Result<GaussianMixturePrior> {
    let mut prior = GaussianMixturePrior::new();
    let dim = width * height * 3;
    let mut marginal = Mixture::single(vec![0.5; dim], UNCOND_BROAD_GAMMA);
    marginal.components[0].weight = UNCOND_BROAD_WEIGHT;

    for (token, mode) in [("text:rgb", RenderMode::Rgb), ("text:normal", RenderMode::NormalMap)] {
        let mut mix = Mixture::default();
        for k in 0..TEXT_PRIOR_VIEWS {
            let az = 360.0 * k as f64 / TEXT_PRIOR_VIEWS as f64;
            let cam = fixed_intrinsics_camera(az, REF_ELEVATION_DEG, width, height);
            let out = render_gt(gt, &cam, samples_per_ray, mode)?;
            marginal.components.push(MixtureComponent {
                mean: out.rgb.data.clone(),
                stdev: UNCOND_NEAR_GAMMA,
                weight: (1.0 - UNCOND_BROAD_WEIGHT) / (2 * TEXT_PRIOR_VIEWS) as f64,
            });
            mix.components.push(MixtureComponent {
                mean: out.rgb.data,
                stdev: TEXT_PRIOR_GAMMA,
                weight: 1.0 / TEXT_PRIOR_VIEWS as f64,
            });
        }
        prior.insert(token, mix);
    }
    prior.insert(UNCOND, marginal);

    for (prefix, mode) in [("view:rgb", RenderMode::Rgb), ("view:normal", RenderMode::NormalMap)] {
        for cam in bucket_cameras(width, height) {
            let out = render_gt(gt, &cam, samples_per_ray, mode)?;
            let token = view_bucket(prefix, cam.azimuth_deg, cam.elevation_deg);
            prior.insert(&token, Mixture::single(out.rgb.data, VIEW_PRIOR_GAMMA));
        }
    }
    Ok(prior)
}

/// Points on the analytic surface, found by Newton projection of random seed
/// points onto the zero set; every returned point satisfies |sdf| < 1e-9.
pub fn surface_samples(gt: &GroundTruth, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let extent = gt
        .primitives
        .iter()
        .map(Primitive::extent)
        .fold(0.0, f64::max)
        + 0.2;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut p = Vector3::new(
            rng.gen_range(-extent..extent),
            rng.gen_range(-extent..extent),
            rng.gen_range(-extent..extent),
        );
        for _ in 0..40 {
            let s = gt.distance(&p);
            if s.abs() < 1e-12 {
                break;
            }
            let h = 1e-6;
            let g = Vector3::new(
                gt.distance(&(p + Vector3::new(h, 0.0, 0.0))) - gt.distance(&(p - Vector3::new(h, 0.0, 0.0))),
                gt.distance(&(p + Vector3::new(0.0, h, 0.0))) - gt.distance(&(p - Vector3::new(0.0, h, 0.0))),
                gt.distance(&(p + Vector3::new(0.0, 0.0, h))) - gt.distance(&(p - Vector3::new(0.0, 0.0, h))),
            ) / (2.0 * h);
            let n2 = g.norm_squared();
            if n2 < 1e-12 {
                break;
            }
            p -= g * (s / n2);
        }
        if gt.distance(&p).abs() < 1e-9 {
            out.push(p);
        }
    }
    out
}
