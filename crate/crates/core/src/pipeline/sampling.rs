//! Schedulers for the optimization loop: annealed diffusion timesteps and
//! the progressive-view camera distribution.

use crate::camera::{orbit_direction, Camera};
use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Camera-distance band for the randomized-intrinsics branch.
pub const RANDOM_DISTANCE: (f64, f64) = (3.2, 3.5);
/// Vertical field-of-view band (degrees) for the randomized branch.
pub const RANDOM_FOV_DEG: (f64, f64) = (10.0, 20.0);
/// Maximum angular distance (radians) between light and camera directions.
pub const LIGHT_ANGLE_MAX: f64 = std::f64::consts::FRAC_PI_3;
/// Point-light distance band.
pub const LIGHT_DISTANCE: (f64, f64) = (7.5, 10.0);

/// Draws t uniformly from a band whose endpoints move linearly from `start`
/// (at progress 0) to `end` (at progress 1). Progress is clamped, so callers
/// that finish annealing early keep sampling from the final band.
pub fn sample_timestep(
    progress: f64,
    start: [f64; 2],
    end: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    let lo = start[0] + (end[0] - start[0]) * p;
    let hi = start[1] + (end[1] - start[1]) * p;
    rng.gen_range(lo..hi)
}

/// Pose/intrinsics schedule parameters (the paper-level constants live in
/// this module; these are the per-experiment knobs).
#[derive(Clone, Debug)]
pub struct CameraSchedule {
    /// Azimuth half-width (degrees) around the reference at progress 0.
    pub view_start_deg: f64,
    /// Fraction of the stage over which the half-width grows to 180°.
    pub view_full_frac: f64,
    /// Elevation band (degrees).
    pub elevation_range: [f64; 2],
    /// Intrinsics used by the fixed branch (and by pose-bucketed priors).
    pub fixed_distance: f64,
    pub fixed_fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

/// One sampled training view. The light draw is part of the scheduler
/// contract and is logged, but RGB rendering stays albedo-only.
#[derive(Clone, Debug)]
pub struct CameraDraw {
    pub camera: Camera,
    pub fixed_intrinsics: bool,
    pub light_dir: Vector3<f64>,
    pub light_distance: f64,
}

/// Samples a training camera: azimuth uniform within a window around the
/// reference that widens linearly to the full circle, elevation uniform in
/// its band, and a fair coin choosing fixed vs randomized distance/FOV.
pub fn sample_camera(
    sched: &CameraSchedule,
    progress: f64,
    reference: &Camera,
    rng: &mut ChaCha8Rng,
) -> CameraDraw {
    let grow = (progress / sched.view_full_frac).clamp(0.0, 1.0);
    let half_width = sched.view_start_deg + (180.0 - sched.view_start_deg) * grow;
    let azimuth = reference.azimuth_deg + rng.gen_range(-half_width..half_width);
    let elevation = rng.gen_range(sched.elevation_range[0]..sched.elevation_range[1]);

    let fixed = rng.gen_bool(0.5);
    let (distance, fov) = if fixed {
        (sched.fixed_distance, sched.fixed_fov_deg)
    } else {
        (
            rng.gen_range(RANDOM_DISTANCE.0..RANDOM_DISTANCE.1),
            rng.gen_range(RANDOM_FOV_DEG.0..RANDOM_FOV_DEG.1),
        )
    };
    let camera = Camera::orbit(
        Point3::origin(),
        azimuth,
        elevation,
        distance,
        fov,
        sched.width,
        sched.height,
    );

    let cam_dir = orbit_direction(azimuth, elevation);
    let theta = rng.gen_range(0.0..LIGHT_ANGLE_MAX);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let helper = if cam_dir.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let u = helper.cross(&cam_dir).normalize();
    let v = cam_dir.cross(&u);
    let light_dir = cam_dir * theta.cos() + (u * phi.cos() + v * phi.sin()) * theta.sin();
    let light_distance = rng.gen_range(LIGHT_DISTANCE.0..LIGHT_DISTANCE.1);

    CameraDraw { camera, fixed_intrinsics: fixed, light_dir, light_distance }
}
