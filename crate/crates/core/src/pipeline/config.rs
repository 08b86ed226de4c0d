//! Experiment configuration: a TOML-serializable schema with strict
//! validation. Unknown keys are rejected; every reported violation names the
//! offending field.

use crate::error::{Error, Result};
use crate::pipeline::sampling::CameraSchedule;
use crate::scenes::{ToyScene, REF_DISTANCE, REF_FOV_DEG};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene name: "sphere", "torus", or "asym".
    pub scene: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub stage: StageConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { width: 32, height: 32, samples_per_ray: 32 }
    }
}

/// All stage-level knobs. The optimizer is adaptive-moment descent
/// (β₁ = 0.9, β₂ = 0.999, ε = 1e-8, bias-corrected) with the step sizes
/// below; the rule is frozen — see `pipeline::optim`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Iteration counts per phase.
    pub neus_iters: u64,
    pub dmtet_iters: u64,
    /// Bootstrap rounds and inner steps per round for the texture stage.
    pub bootstrap_rounds: u64,
    pub texture_iters_per_round: u64,
    /// Scene step size (fields / texture), lattice step size (the mesh phase
    /// nudges an already-converged surface, so it steps much smaller), and
    /// estimator step size.
    pub eta_scene: f64,
    pub eta_mesh: f64,
    pub eta_estimator: f64,
    /// Weight of the pose-conditioned term inside the hybrid gradient.
    pub mu: f64,
    /// Guidance scales: geometry distillation and texture distillation.
    pub cfg_geometry: f64,
    pub cfg_texture: f64,
    /// Diffusion-timestep band at the start/end of annealing, plus the
    /// fraction of the geometry stage over which the band moves.
    pub t_range_start: [f64; 2],
    pub t_range_end: [f64; 2],
    pub anneal_frac: f64,
    /// Restoration strength per bootstrap round (round r uses entry
    /// min(r, len−1)).
    pub t_prime: Vec<f64>,
    /// Progressive-view schedule and elevation band (degrees).
    pub view_start_deg: f64,
    pub view_full_frac: f64,
    pub elevation_range: [f64; 2],
    /// Views rendered into each bootstrap dataset.
    pub dataset_views: usize,
    /// Tetrahedral lattice resolution for mesh extraction.
    pub grid_resolution: usize,
    /// Reference-view loss weights.
    pub w_rgb: f64,
    pub w_mask: f64,
    pub w_depth: f64,
    pub w_normal: f64,
    /// Distillation gradient weights. `w_sds` drives the implicit-surface
    /// phase; `w_sds_mesh` the mesh-geometry phase. The mesh rasterizer is
    /// hard (no silhouette gradient), so nothing pushes back if distillation
    /// inflates the shape past the reference mask — keep the mesh weight an
    /// order of magnitude smaller. `w_bsd` drives the texture stage.
    pub w_sds: f64,
    pub w_sds_mesh: f64,
    pub w_bsd: f64,
    /// Timestep band for online-estimator updates. Kept mid-band: the
    /// estimator's variance step scales like 1/(α²v+σ²)², which blows up
    /// when both v and σ are small.
    pub estimator_t_range: [f64; 2],
    /// Mixing weight of the class prior inside each refit bucket.
    pub lambda_class: f64,
    /// Logistic steepness annealing target for the implicit-surface phase.
    pub steepness_final: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            neus_iters: 240,
            dmtet_iters: 120,
            bootstrap_rounds: 2,
            texture_iters_per_round: 60,
            eta_scene: 0.02,
            eta_mesh: 0.002,
            eta_estimator: 0.05,
            mu: 2.0,
            cfg_geometry: 7.5,
            cfg_texture: 1.0,
            t_range_start: [0.7, 0.85],
            t_range_end: [0.2, 0.5],
            anneal_frac: 0.8,
            t_prime: vec![0.5, 0.2],
            view_start_deg: 45.0,
            view_full_frac: 0.5,
            elevation_range: [0.0, 40.0],
            dataset_views: 16,
            grid_resolution: 32,
            w_rgb: 10.0,
            w_mask: 2.0,
            w_depth: 0.5,
            w_normal: 1.0,
            w_sds: 0.01,
            w_sds_mesh: 0.0002,
            w_bsd: 0.1,
            estimator_t_range: [0.3, 0.7],
            lambda_class: 0.2,
            steepness_final: 256.0,
        }
    }
}

fn check_unit_range(field: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] < r[1] && r[1] <= 1.0) {
        return Err(Error::Config(format!(
            "{field}: expected 0 ≤ lo < hi ≤ 1, got [{}, {}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

fn check_positive(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("{field}: expected a positive value, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn scene(&self) -> Result<ToyScene> {
        ToyScene::from_name(&self.scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene()
            .map_err(|_| Error::Config(format!("scene: unknown scene '{}'", self.scene)))?;
        if self.render.width < 4 || self.render.height < 4 {
            return Err(Error::Config(format!(
                "render.width/render.height: expected ≥ 4, got {}×{}",
                self.render.width, self.render.height
            )));
        }
        if self.render.samples_per_ray < 16 {
            return Err(Error::Config(format!(
                "render.samples_per_ray: expected ≥ 16, got {}",
                self.render.samples_per_ray
            )));
        }
        let s = &self.stage;
        check_unit_range("stage.t_range_start", s.t_range_start)?;
        check_unit_range("stage.t_range_end", s.t_range_end)?;
        check_unit_range("stage.estimator_t_range", s.estimator_t_range)?;
        for (i, tp) in s.t_prime.iter().enumerate() {
            if !(0.0..=1.0).contains(tp) {
                return Err(Error::Config(format!(
                    "stage.t_prime[{i}]: expected within [0, 1], got {tp}"
                )));
            }
        }
        if s.t_prime.is_empty() {
            return Err(Error::Config("stage.t_prime: expected at least one entry".into()));
        }
        if !(s.anneal_frac > 0.0 && s.anneal_frac <= 1.0) {
            return Err(Error::Config(format!(
                "stage.anneal_frac: expected within (0, 1], got {}",
                s.anneal_frac
            )));
        }
        if !(s.view_full_frac > 0.0 && s.view_full_frac <= 1.0) {
            return Err(Error::Config(format!(
                "stage.view_full_frac: expected within (0, 1], got {}",
                s.view_full_frac
            )));
        }
        check_positive("stage.eta_scene", s.eta_scene)?;
        check_positive("stage.eta_mesh", s.eta_mesh)?;
        check_positive("stage.eta_estimator", s.eta_estimator)?;
        check_positive("stage.steepness_final", s.steepness_final)?;
        for (name, v) in [
            ("stage.mu", s.mu),
            ("stage.cfg_geometry", s.cfg_geometry),
            ("stage.cfg_texture", s.cfg_texture),
            ("stage.lambda_class", s.lambda_class),
            ("stage.w_rgb", s.w_rgb),
            ("stage.w_mask", s.w_mask),
            ("stage.w_depth", s.w_depth),
            ("stage.w_normal", s.w_normal),
            ("stage.w_sds", s.w_sds),
            ("stage.w_sds_mesh", s.w_sds_mesh),
            ("stage.w_bsd", s.w_bsd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name}: expected a finite non-negative value, got {v}"
                )));
            }
        }
        if s.lambda_class >= 1.0 {
            return Err(Error::Config(format!(
                "stage.lambda_class: expected within [0, 1), got {}",
                s.lambda_class
            )));
        }
        if !(s.view_start_deg > 0.0 && s.view_start_deg <= 180.0) {
            return Err(Error::Config(format!(
                "stage.view_start_deg: expected within (0, 180], got {}",
                s.view_start_deg
            )));
        }
        let el = s.elevation_range;
        if !(el[0] < el[1] && el[0] > -90.0 && el[1] < 90.0) {
            return Err(Error::Config(format!(
                "stage.elevation_range: expected −90 < lo < hi < 90, got [{}, {}]",
                el[0], el[1]
            )));
        }
        if s.dataset_views == 0 {
            return Err(Error::Config("stage.dataset_views: expected > 0".into()));
        }
        if s.grid_resolution < 4 {
            return Err(Error::Config(format!(
                "stage.grid_resolution: expected ≥ 4, got {}",
                s.grid_resolution
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn camera_schedule(&self) -> CameraSchedule {
        CameraSchedule {
            view_start_deg: self.stage.view_start_deg,
            view_full_frac: self.stage.view_full_frac,
            elevation_range: self.stage.elevation_range,
            fixed_distance: REF_DISTANCE,
            fixed_fov_deg: REF_FOV_DEG,
            width: self.render.width,
            height: self.render.height,
        }
    }
}
