//! Full optimization hierarchy: implicit-surface sculpting, conversion to a
//! deformable tetrahedral lattice, mesh-phase refinement, and bootstrapped
//! texture distillation — plus checkpointing and the experiment driver.
//!
//! Determinism contract: every random draw flows through one counter-based
//! generator seeded from the config, parallel reductions join in a fixed
//! order, and telemetry carries no timestamps, so identical config + seed
//! reproduce checkpoints and metrics bit for bit.

pub mod config;
pub mod metrics;
pub mod optim;
pub mod sampling;
pub mod telemetry;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::fields::{init_field, ColorField, FieldInit, Primitive, SdfField};
use crate::img::Image;
use crate::io::container::Container;
use crate::losses::{
    bsd_grad, cosine_normal_loss, hybrid_grad, mask_loss, masked_rgb_loss, pearson_depth_loss,
    sds_3d_grad, sds_grad, ReferencePack,
};
use crate::priors::{add_noise, augment_renderings, fit_prior, view_bucket, GaussianMixturePrior,
    OnlineScoreEstimator, UNCOND};
use crate::render::mesh::{render_mesh, render_mesh_vjp, MeshWrt};
use crate::render::neus::{render_neus, render_neus_vjp, NeusGradients};
use crate::render::{RenderAdjoint, RenderMode, RenderOptions, RenderOutput};
use crate::scenes::{
    build_prior_bundle, fixed_intrinsics_camera, ground_truth, render_reference_pack,
};
use crate::tetra::{init_grid_from_field, marching_tetrahedra, TetGrid, TriMesh};
use config::ExperimentConfig;
use metrics::{compute_metrics, Metrics};
use nalgebra::Vector3;
use optim::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sampling::{sample_camera, sample_timestep, CameraDraw};
use std::collections::BTreeMap;
use telemetry::{Event, IterRecord, Telemetry};

/// Optimization phases, in their only legal order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Neus,
    DmtetGeometry,
    Texture,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Neus => "neus",
            Phase::DmtetGeometry => "dmtet-geometry",
            Phase::Texture => "texture",
        }
    }

    pub fn from_name(name: &str) -> Result<Phase> {
        match name {
            "neus" => Ok(Phase::Neus),
            "dmtet-geometry" => Ok(Phase::DmtetGeometry),
            "texture" => Ok(Phase::Texture),
            other => Err(Error::Container(format!("unknown phase '{other}'"))),
        }
    }
}

/// Everything the optimizer owns: the implicit surface, the shared color
/// field (texture), and — once the mesh phases begin — the tetrahedral
/// lattice the surface was frozen into.
#[derive(Clone, Debug)]
pub struct SceneState {
    pub phase: Phase,
    pub iteration: u64,
    pub sdf: SdfField,
    pub color: ColorField,
    pub grid: Option<TetGrid>,
}

/// Initial steepness of the SDF-to-opacity logistic; annealed upward.
const STEEPNESS_INIT: f64 = 16.0;
/// Optimized-field pyramid (coarse-to-fine residual grids).
const FIELD_RESOLUTIONS: [usize; 3] = [8, 16, 32];
/// Initialization geometry: a centered sphere of this radius, mid-gray.
const INIT_SPHERE_RADIUS: f64 = 0.3;

impl SceneState {
    /// Fresh state: a mid-gray sphere, soft surface, no lattice.
    pub fn initial() -> Result<SceneState> {
        let opts = FieldInit {
            resolutions: FIELD_RESOLUTIONS.to_vec(),
            steepness: STEEPNESS_INIT,
            ..FieldInit::default()
        };
        let sphere = Primitive::Sphere { center: Vector3::zeros(), radius: INIT_SPHERE_RADIUS };
        let (sdf, color) = init_field(&[sphere], &|_p| Vector3::new(0.5, 0.5, 0.5), &opts)?;
        Ok(SceneState { phase: Phase::Neus, iteration: 0, sdf, color, grid: None })
    }

    /// Phase transitions are forward-only.
    pub fn advance_phase(&mut self, next: Phase) -> Result<()> {
        if next <= self.phase {
            return Err(Error::Config(format!(
                "phase may not move from {} back to {}",
                self.phase.name(),
                next.name()
            )));
        }
        self.phase = next;
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over every geometry parameter's bit
    /// pattern (field grid, steepness, lattice values and offsets). The
    /// texture stage asserts this is untouched.
    pub fn geometry_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for v in self.sdf.grid.params_flat() {
            eat(v);
        }
        eat(self.sdf.steepness);
        eat(self.sdf.bias_amplitude);
        if let Some(grid) = &self.grid {
            for v in &grid.sdf {
                eat(*v);
            }
            for o in &grid.offsets {
                eat(o.x);
                eat(o.y);
                eat(o.z);
            }
        }
        h
    }

    /// Renderer for the current representation: implicit surface before the
    /// lattice exists, extracted mesh afterwards.
    pub fn renderer(&self) -> StateRenderer<'_> {
        let mesh = self.grid.as_ref().map(marching_tetrahedra);
        StateRenderer { state: self, mesh }
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        use crate::io::container::Payload;
        c.insert(&format!("{prefix}/phase"), Payload::text(self.phase.name()));
        c.insert(&format!("{prefix}/iteration"), Payload::scalar_u64(self.iteration));
        self.sdf.write_into(c, &format!("{prefix}/sdf"));
        self.color.write_into(c, &format!("{prefix}/color"));
        c.insert(
            &format!("{prefix}/has_grid"),
            Payload::scalar_u64(u64::from(self.grid.is_some())),
        );
        if let Some(grid) = &self.grid {
            grid.write_into(c, &format!("{prefix}/grid"));
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<SceneState> {
        let phase = Phase::from_name(&c.get(&format!("{prefix}/phase"))?.as_text()?)?;
        let iteration = c.get(&format!("{prefix}/iteration"))?.as_u64()?[0];
        let sdf = SdfField::read_from(c, &format!("{prefix}/sdf"))?;
        let color = ColorField::read_from(c, &format!("{prefix}/color"))?;
        let grid = if c.get(&format!("{prefix}/has_grid"))?.as_u64()?[0] == 1 {
            Some(TetGrid::read_from(c, &format!("{prefix}/grid"))?)
        } else {
            None
        };
        Ok(SceneState { phase, iteration, sdf, color, grid })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = Container::new();
        self.write_into(&mut c, "state");
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<SceneState> {
        let c = Container::load(path)?;
        SceneState::read_from(&c, "state")
    }
}

/// Phase-appropriate view of a state for rendering.
pub struct StateRenderer<'a> {
    state: &'a SceneState,
    mesh: Option<TriMesh>,
}

impl StateRenderer<'_> {
    pub fn mesh(&self) -> Option<&TriMesh> {
        self.mesh.as_ref()
    }

    pub fn render(&self, camera: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
        match &self.mesh {
            Some(mesh) => render_mesh(mesh, &self.state.color, camera, &opts.mode),
            None => render_neus(&self.state.sdf, &self.state.color, camera, opts),
        }
    }
}

fn render_options(cfg: &ExperimentConfig, mode: RenderMode) -> RenderOptions {
    RenderOptions { samples_per_ray: cfg.render.samples_per_ray, mode, ..RenderOptions::default() }
}

fn draw_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn ensure_finite<'a>(
    label: &str,
    iter: u64,
    values: impl Iterator<Item = &'a f64>,
) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite {label} parameter at iteration {iter}"
            )));
        }
    }
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reference-view supervision shared by both geometry phases: renders the
/// state at the reference camera and contracts the four losses into one
/// image-space adjoint.
///
/// Depth and normals are compared only where the rendered and reference
/// masks overlap — a pixel one side treats as background carries no valid
/// depth or normal, and scoring it would anti-correlate depth whenever the
/// shapes differ. The terms are skipped (zero) while the overlap is empty or
/// the rendered depth is constant on it.
struct RefPass {
    adjoint: RenderAdjoint,
    losses: BTreeMap<String, f64>,
}

fn reference_pass(out: &RenderOutput, pack: &ReferencePack, cfg: &ExperimentConfig) -> Result<RefPass> {
    let s = &cfg.stage;
    let (w, h) = (pack.rgb.width, pack.rgb.height);
    let mut adjoint = RenderAdjoint::zeros(w, h);
    let mut losses = BTreeMap::new();

    let (l_rgb, g_rgb) = masked_rgb_loss(&out.rgb, pack)?;
    adjoint.rgb = g_rgb.scale(s.w_rgb);
    losses.insert("rgb".into(), l_rgb);

    let (l_mask, g_mask) = mask_loss(&out.mask, &pack.mask)?;
    adjoint.mask = g_mask.scale(s.w_mask);
    losses.insert("mask".into(), l_mask);

    let mut overlap = pack.mask.clone();
    for (m, r) in overlap.data.iter_mut().zip(&out.mask.data) {
        *m = f64::from(*m >= 0.5 && *r >= 0.5);
    }

    match pearson_depth_loss(&out.depth, &pack.depth, &overlap) {
        Ok((l_depth, g_depth)) => {
            adjoint.depth = g_depth.scale(s.w_depth);
            losses.insert("depth".into(), l_depth);
        }
        Err(Error::DegenerateDepth) => {
            losses.insert("depth".into(), 0.0);
        }
        Err(e) => return Err(e),
    }

    match cosine_normal_loss(&out.normal, &pack.normal, &overlap) {
        Ok((l_normal, g_normal)) => {
            adjoint.normal = g_normal.scale(s.w_normal);
            losses.insert("normal".into(), l_normal);
        }
        Err(Error::EmptyInput(_)) | Err(Error::ZeroNormal) => {
            losses.insert("normal".into(), 0.0);
        }
        Err(e) => return Err(e),
    }

    Ok(RefPass { adjoint, losses })
}

/// Hybrid distillation gradient for a novel view, as an image-space adjoint.
fn novel_adjoint(
    out: &RenderOutput,
    draw: &CameraDraw,
    t: f64,
    text_condition: &str,
    view_condition: &str,
    weight: f64,
    priors: &GaussianMixturePrior,
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RenderAdjoint, f64)> {
    let s = &cfg.stage;
    let flat = &out.rgb.data;
    let eps = draw_noise(rng, flat.len());
    let g_2d = sds_grad(priors, flat, t, text_condition, &eps, s.cfg_geometry)?;
    let g_3d = sds_3d_grad(priors, flat, &draw.camera, view_condition, t, &eps)?;
    let g = hybrid_grad(&g_2d, &g_3d, s.mu)?;
    let norm = l2(&g);
    let mut adjoint = RenderAdjoint::zeros(out.rgb.width, out.rgb.height);
    for (a, gi) in adjoint.rgb.data.iter_mut().zip(&g) {
        *a = weight * gi;
    }
    Ok((adjoint, norm))
}

fn record_iteration(
    tel: &mut Telemetry,
    state: &SceneState,
    t: f64,
    draw: &CameraDraw,
    losses: BTreeMap<String, f64>,
) -> Result<()> {
    tel.record(IterRecord {
        iter: state.iteration,
        phase: state.phase.name().into(),
        t,
        azimuth_deg: draw.camera.azimuth_deg,
        elevation_deg: draw.camera.elevation_deg,
        fixed_intrinsics: draw.fixed_intrinsics,
        losses,
    })
}

/// Geometry sculpting: implicit-surface phase, lattice conversion, mesh
/// phase. A fully zero-iteration stage returns the untouched initialization.
pub fn run_geometry_stage(
    cfg: &ExperimentConfig,
    reference: &ReferencePack,
    priors: &GaussianMixturePrior,
    rng: &mut ChaCha8Rng,
    tel: &mut Telemetry,
) -> Result<SceneState> {
    let s = &cfg.stage;
    let mut state = SceneState::initial()?;
    if s.neus_iters + s.dmtet_iters == 0 {
        return Ok(state);
    }
    let total = (s.neus_iters + s.dmtet_iters) as f64;
    let sched = cfg.camera_schedule();
    let opts_rgb = render_options(cfg, RenderMode::Rgb);

    let mut adam_sdf = Adam::new(state.sdf.grid.param_len(), s.eta_scene);
    let mut adam_color = Adam::new(state.color.grid.param_len(), s.eta_scene);

    for i in 0..s.neus_iters {
        let progress = state.iteration as f64 / total;
        // Surface sharpness anneals geometrically toward its final value
        // over the implicit phase.
        let anneal = (i + 1) as f64 / s.neus_iters as f64;
        state.sdf.steepness =
            STEEPNESS_INIT * (s.steepness_final / STEEPNESS_INIT).powf(anneal);

        let ref_out = render_neus(&state.sdf, &state.color, &reference.camera, &opts_rgb)?;
        let ref_pass = reference_pass(&ref_out, reference, cfg)?;
        let ref_grads =
            render_neus_vjp(&state.sdf, &state.color, &reference.camera, &opts_rgb, &ref_pass.adjoint)?;

        let draw = sample_camera(&sched, progress, &reference.camera, rng);
        let t = sample_timestep(progress / s.anneal_frac, s.t_range_start, s.t_range_end, rng);
        let novel_out = render_neus(&state.sdf, &state.color, &draw.camera, &opts_rgb)?;
        let (novel_adj, g_norm) =
            novel_adjoint(&novel_out, &draw, t, "text:rgb", "view:rgb", s.w_sds, priors, cfg, rng)?;
        let novel_grads =
            render_neus_vjp(&state.sdf, &state.color, &draw.camera, &opts_rgb, &novel_adj)?;

        let mut g_sdf = ref_grads.sdf;
        for (a, b) in g_sdf.iter_mut().zip(&novel_grads.sdf) {
            *a += b;
        }
        let mut g_color = ref_grads.color;
        for (a, b) in g_color.iter_mut().zip(&novel_grads.color) {
            *a += b;
        }

        let mut p_sdf = state.sdf.grid.params_flat();
        adam_sdf.step(&mut p_sdf, &g_sdf)?;
        ensure_finite("surface", state.iteration, p_sdf.iter())?;
        state.sdf.grid.set_params_flat(&p_sdf)?;

        let mut p_color = state.color.grid.params_flat();
        adam_color.step(&mut p_color, &g_color)?;
        ensure_finite("color", state.iteration, p_color.iter())?;
        state.color.grid.set_params_flat(&p_color)?;

        let mut losses = ref_pass.losses;
        losses.insert("distill_norm".into(), g_norm);
        record_iteration(tel, &state, t, &draw, losses)?;
        state.iteration += 1;
    }

    // Freeze the implicit surface into a deformable lattice and continue on
    // the extracted mesh.
    let grid = init_grid_from_field(&state.sdf, s.grid_resolution)?;
    state.grid = Some(grid);
    state.advance_phase(Phase::DmtetGeometry)?;
    tel.event(Event::new("phase_transition").iter(state.iteration).info(
        "grid_resolution",
        s.grid_resolution as f64,
    ))?;

    let mut adam_grid_sdf;
    let mut adam_offsets;
    {
        let grid = state.grid.as_ref().expect("lattice was just created");
        adam_grid_sdf = Adam::new(grid.sdf.len(), s.eta_mesh);
        adam_offsets = Adam::new(grid.offsets.len() * 3, s.eta_mesh);
    }
    let mut adam_color = Adam::new(state.color.grid.param_len(), s.eta_mesh);

    for i in 0..s.dmtet_iters {
        let progress = state.iteration as f64 / total;
        let mesh = marching_tetrahedra(state.grid.as_ref().expect("lattice exists"));
        if mesh.triangles.is_empty() {
            return Err(Error::Divergence(format!(
                "surface vanished from the lattice at iteration {}",
                state.iteration
            )));
        }

        let ref_out = render_mesh(&mesh, &state.color, &reference.camera, &RenderMode::Rgb)?;
        let ref_pass = reference_pass(&ref_out, reference, cfg)?;
        // Appearance error steers the texture; only the geometric cues
        // (depth, normals) steer vertices. Letting color error push vertices
        // invites paint-by-deformation: the rasterizer is hard, so vertices
        // can chase shading without any silhouette accountability.
        let mut adj_tex = RenderAdjoint::zeros(ref_out.rgb.width, ref_out.rgb.height);
        adj_tex.rgb = ref_pass.adjoint.rgb.clone();
        let mut adj_geo = ref_pass.adjoint.clone();
        adj_geo.rgb = Image::zeros(ref_out.rgb.width, ref_out.rgb.height, 3);
        let ref_grads_tex = render_mesh_vjp(
            &mesh,
            &state.color,
            &reference.camera,
            &RenderMode::Rgb,
            &adj_tex,
            MeshWrt::Texture,
        )?;
        let ref_grads = render_mesh_vjp(
            &mesh,
            &state.color,
            &reference.camera,
            &RenderMode::Rgb,
            &adj_geo,
            MeshWrt::Vertices,
        )?;

        // Alternate appearance-space and normal-space guidance on novel
        // views.
        let (mode, text_cond, view_cond) = if i % 2 == 0 {
            (RenderMode::Rgb, "text:rgb", "view:rgb")
        } else {
            (RenderMode::NormalMap, "text:normal", "view:normal")
        };
        let draw = sample_camera(&sched, progress, &reference.camera, rng);
        let t = sample_timestep(progress / s.anneal_frac, s.t_range_start, s.t_range_end, rng);
        let novel_out = render_mesh(&mesh, &state.color, &draw.camera, &mode)?;
        let (novel_adj, g_norm) =
            novel_adjoint(&novel_out, &draw, t, text_cond, view_cond, s.w_sds_mesh, priors, cfg, rng)?;
        let novel_grads =
            render_mesh_vjp(&mesh, &state.color, &draw.camera, &mode, &novel_adj, MeshWrt::Both)?;

        let mut g_tex = ref_grads_tex.texture;
        for (a, b) in g_tex.iter_mut().zip(&novel_grads.texture) {
            *a += b;
        }
        let mut g_vert = ref_grads.vertices;
        for (a, b) in g_vert.iter_mut().zip(&novel_grads.vertices) {
            *a += b;
        }

        let grid = state.grid.as_mut().expect("lattice exists");
        let (g_sdf, g_off) = crate::tetra::backprop_vertices(grid, &mesh, &g_vert)?;

        adam_grid_sdf.step(&mut grid.sdf, &g_sdf)?;
        ensure_finite("lattice", state.iteration, grid.sdf.iter())?;

        let mut off_flat: Vec<f64> =
            grid.offsets.iter().flat_map(|o| [o.x, o.y, o.z]).collect();
        let off_grad: Vec<f64> = g_off.iter().flat_map(|o| [o.x, o.y, o.z]).collect();
        adam_offsets.step(&mut off_flat, &off_grad)?;
        ensure_finite("offset", state.iteration, off_flat.iter())?;
        for (o, c) in grid.offsets.iter_mut().zip(off_flat.chunks_exact(3)) {
            *o = Vector3::new(c[0], c[1], c[2]);
        }
        grid.clamp_offsets();

        let mut p_color = state.color.grid.params_flat();
        adam_color.step(&mut p_color, &g_tex)?;
        ensure_finite("color", state.iteration, p_color.iter())?;
        state.color.grid.set_params_flat(&p_color)?;

        let mut losses = ref_pass.losses;
        losses.insert("distill_norm".into(), g_norm);
        record_iteration(tel, &state, t, &draw, losses)?;
        state.iteration += 1;
    }

    Ok(state)
}

/// Cameras for one bootstrap dataset: azimuth bins in order, lower
/// elevation ring first, wrapping for counts beyond 16 — so any count ≥ 16
/// covers every pose bucket. View 0 is exactly the reference pose, which
/// lets the refit prior's restoration signal reach the reference view
/// unshifted.
pub fn dataset_cameras(count: usize, width: usize, height: usize) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let az = 45.0 * (k % 8) as f64;
            let el = if (k / 8) % 2 == 0 { 15.0 } else { 35.0 };
            fixed_intrinsics_camera(az, el, width, height)
        })
        .collect()
}

/// Texture boosting: alternating rounds of (render dataset → restore →
/// refit prior) and inner distillation steps against that refit prior, with
/// the online estimator tracking the texture distribution. Geometry is
/// frozen; its fingerprint is asserted unchanged.
pub fn run_texture_stage(
    cfg: &ExperimentConfig,
    mut state: SceneState,
    priors: &GaussianMixturePrior,
    rng: &mut ChaCha8Rng,
    tel: &mut Telemetry,
) -> Result<SceneState> {
    let s = &cfg.stage;
    if state.phase != Phase::DmtetGeometry {
        return Err(Error::Config(format!(
            "texture stage requires a mesh-phase state, got {}",
            state.phase.name()
        )));
    }
    state.advance_phase(Phase::Texture)?;
    let before = state.geometry_fingerprint();

    if s.bootstrap_rounds > 0 && s.texture_iters_per_round > 0 {
        let mesh = marching_tetrahedra(
            state
                .grid
                .as_ref()
                .ok_or_else(|| Error::Config("texture stage requires a lattice".into()))?,
        );
        if mesh.triangles.is_empty() {
            return Err(Error::Divergence("no surface to texture".into()));
        }
        let (w, h) = (cfg.render.width, cfg.render.height);
        let dim = w * h * 3;
        let class_mixture = priors.get("text:rgb")?;
        let mut estimator = OnlineScoreEstimator::new(dim, s.eta_estimator);
        let mut adam_tex = Adam::new(state.color.grid.param_len(), s.eta_scene);

        for round in 0..s.bootstrap_rounds {
            let idx = (round as usize).min(s.t_prime.len() - 1);
            let t_prime = s.t_prime[idx];
            let cams = dataset_cameras(s.dataset_views, w, h);
            let mut images = Vec::with_capacity(cams.len());
            for cam in &cams {
                let out = render_mesh(&mesh, &state.color, cam, &RenderMode::Rgb)?;
                let cond = view_bucket("view:rgb", cam.azimuth_deg, cam.elevation_deg);
                images.push((out.rgb.data, cond));
            }
            // Restore each render toward the prior for its own pose bucket
            // (restoring toward the pose-agnostic class mixture would drag
            // every view toward whichever class component is nearest, losing
            // view consistency), then refit the pose-bucketed prior on the
            // restored dataset.
            let restored = augment_renderings(priors, &images, t_prime, rng)?;
            let paired: Vec<(Vec<f64>, Camera)> =
                restored.into_iter().zip(cams.iter().cloned()).collect();
            let class = if s.lambda_class > 0.0 {
                Some((class_mixture, s.lambda_class))
            } else {
                None
            };
            let mut booth = fit_prior(&paired, "booth:rgb", class)?;
            booth.insert(UNCOND, priors.get(UNCOND)?.clone());
            tel.event(
                Event::new("fit_prior")
                    .round(round)
                    .iter(state.iteration)
                    .info("t_prime", t_prime)
                    .info("views", paired.len() as f64),
            )?;

            for _ in 0..s.texture_iters_per_round {
                // The refit prior is pixel-aligned per pose bucket, so the
                // distillation view must sit at a dataset pose — a free pose
                // inside the bucket would distill a shifted target into the
                // texture.
                let camera = cams[rng.gen_range(0..cams.len())].clone();
                let t = sample_timestep(1.0, s.t_range_start, s.t_range_end, rng);
                let out = render_mesh(&mesh, &state.color, &camera, &RenderMode::Rgb)?;
                let bucket =
                    view_bucket("booth:rgb", camera.azimuth_deg, camera.elevation_deg);
                // Closed-form solve of the estimator's inner problem for this
                // bucket (mean = the render it will be queried about). The
                // distillation residual then cancels the shared noise draw
                // exactly; without it the gradient is noise at this scale.
                estimator.set_params(&bucket, out.rgb.data.clone(), 0.0)?;
                let eps = draw_noise(rng, dim);
                let g = bsd_grad(
                    &booth,
                    &mut estimator,
                    &out.rgb.data,
                    t,
                    "booth:rgb",
                    &camera,
                    &eps,
                    s.cfg_texture,
                )?;
                let mut adjoint = RenderAdjoint::zeros(w, h);
                for (a, gi) in adjoint.rgb.data.iter_mut().zip(&g) {
                    *a = s.w_bsd * gi;
                }
                let grads = render_mesh_vjp(
                    &mesh,
                    &state.color,
                    &camera,
                    &RenderMode::Rgb,
                    &adjoint,
                    MeshWrt::Texture,
                )?;
                let mut p_color = state.color.grid.params_flat();
                adam_tex.step(&mut p_color, &grads.texture)?;
                ensure_finite("texture", state.iteration, p_color.iter())?;
                state.color.grid.set_params_flat(&p_color)?;

                // One tracking step on the pre-update render, mid-band
                // timestep (the variance update is unstable at small σ).
                let te = rng.gen_range(s.estimator_t_range[0]..s.estimator_t_range[1]);
                let eps_e = draw_noise(rng, dim);
                let x_te = add_noise(&out.rgb.data, te, &eps_e)?;
                estimator.update(&x_te, te, &eps_e, &bucket)?;
                tel.event(Event::new("estimator_update").round(round).iter(state.iteration))?;

                let mut losses = BTreeMap::new();
                losses.insert("distill_norm".into(), l2(&g));
                tel.record(IterRecord {
                    iter: state.iteration,
                    phase: state.phase.name().into(),
                    t,
                    azimuth_deg: camera.azimuth_deg,
                    elevation_deg: camera.elevation_deg,
                    fixed_intrinsics: true,
                    losses,
                })?;
                state.iteration += 1;
            }
        }
    }

    assert_eq!(
        state.geometry_fingerprint(),
        before,
        "texture stage must leave geometry bitwise unchanged"
    );
    Ok(state)
}

/// Final state plus the metric snapshots the regression gates compare.
pub struct ExperimentOutput {
    pub state: SceneState,
    pub after_geometry: Metrics,
    pub after_texture: Metrics,
}

/// Runs the full hierarchy for one config: ground truth → priors →
/// geometry stage → texture stage, measuring after each stage.
pub fn run_experiment(cfg: &ExperimentConfig, tel: &mut Telemetry) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let gt = ground_truth(cfg.scene()?)?;
    let (w, h, spp) = (cfg.render.width, cfg.render.height, cfg.render.samples_per_ray);
    let pack = render_reference_pack(&gt, w, h, spp)?;
    let priors = build_prior_bundle(&gt, w, h, spp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let state = run_geometry_stage(cfg, &pack, &priors, &mut rng, tel)?;
    let after_geometry = compute_metrics(&state, &gt, &pack, cfg)?;
    let state = run_texture_stage(cfg, state, &priors, &mut rng, tel)?;
    let after_texture = compute_metrics(&state, &gt, &pack, cfg)?;
    tel.flush()?;
    Ok(ExperimentOutput { state, after_geometry, after_texture })
}
