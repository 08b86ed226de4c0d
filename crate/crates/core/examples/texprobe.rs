//! Texture-stage diagnostic: decomposes the bootstrap loop into its causal
//! chain and prints fidelity at each link. Temporary bring-up tool.

use lift3d::img::{psnr, Image};
use lift3d::losses::bsd_grad;
use lift3d::pipeline::config::ExperimentConfig;
use lift3d::pipeline::optim::Adam;
use lift3d::pipeline::sampling::{sample_camera, sample_timestep};
use lift3d::pipeline::{dataset_cameras, run_geometry_stage, SceneState};
use lift3d::pipeline::telemetry::Telemetry;
use lift3d::priors::{add_noise, augment_renderings, fit_prior, view_bucket, OnlineScoreEstimator, UNCOND};
use lift3d::render::mesh::{render_mesh, render_mesh_vjp, MeshWrt};
use lift3d::render::{RenderAdjoint, RenderMode};
use lift3d::scenes::{build_prior_bundle, ground_truth, render_gt, render_reference_pack, ToyScene};
use lift3d::tetra::marching_tetrahedra;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn img_psnr(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let ia = Image { width: w, height: h, channels: a.len() / (w * h), data: a.to_vec() };
    let ib = Image { width: w, height: h, channels: b.len() / (w * h), data: b.to_vec() };
    psnr(&ia, &ib)
}

fn main() {
    let cfg = ExperimentConfig::from_toml("scene = \"sphere\"\n").unwrap();
    let s = &cfg.stage;
    let (w, h) = (cfg.render.width, cfg.render.height);
    let dim = w * h * 3;
    let spp = cfg.render.samples_per_ray;

    let gt = ground_truth(ToyScene::Sphere).unwrap();
    let pack = render_reference_pack(&gt, w, h, spp).unwrap();
    let priors = build_prior_bundle(&gt, w, h, spp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tel = Telemetry::in_memory();

    let path = std::path::Path::new("/tmp/texprobe_state.bin");
    let state = if path.exists() {
        println!("[loading cached post-geometry state]");
        SceneState::load(path).unwrap()
    } else {
        let st = run_geometry_stage(&cfg, &pack, &priors, &mut rng, &mut tel).unwrap();
        st.save(path).unwrap();
        st
    };

    let mut color = state.color.clone();
    let gt_geometry = std::env::var("TEX_GTGEO").map(|v| v != "0").unwrap_or(false);
    let grid = if gt_geometry {
        println!("[using ground-truth geometry]");
        lift3d::tetra::init_grid_from_field(&gt.sdf, s.grid_resolution).unwrap()
    } else {
        state.grid.clone().unwrap()
    };
    let mesh = marching_tetrahedra(&grid);
    let cams = dataset_cameras(s.dataset_views, w, h);

    // GT renders at the dataset poses for fidelity scoring.
    let gt_at: Vec<Vec<f64>> = cams
        .iter()
        .map(|c| render_gt(&gt, c, spp, RenderMode::Rgb).unwrap().rgb.data)
        .collect();

    // Link 1: current render fidelity at dataset poses.
    let mut renders = Vec::new();
    let mut acc = 0.0;
    for (cam, gt_img) in cams.iter().zip(&gt_at) {
        let out = render_mesh(&mesh, &color, cam, &RenderMode::Rgb).unwrap();
        acc += img_psnr(&out.rgb.data, gt_img, w, h);
        let cond = view_bucket("view:rgb", cam.azimuth_deg, cam.elevation_deg);
        renders.push((out.rgb.data, cond));
    }
    println!("render fidelity at dataset poses: mean PSNR {:.2}", acc / cams.len() as f64);

    // Link 2: restoration fidelity at each configured strength.
    for &tp in &[0.2, 0.35, 0.5, 0.65] {
        let restored = augment_renderings(&priors, &renders, tp, &mut rng).unwrap();
        let mut racc = 0.0;
        let mut iacc = 0.0;
        for ((r, gt_img), (orig, _)) in restored.iter().zip(&gt_at).zip(&renders) {
            racc += img_psnr(r, gt_img, w, h);
            iacc += img_psnr(r, orig, w, h);
        }
        println!(
            "restored @ t'={tp}: mean PSNR vs GT {:.2}, vs input {:.2}",
            racc / cams.len() as f64,
            iacc / cams.len() as f64
        );
    }

    // Link 3: booth prior fidelity (refit on restored dataset, round-0 t').
    let restored = augment_renderings(&priors, &renders, s.t_prime[0], &mut rng).unwrap();
    let paired: Vec<_> = restored.into_iter().zip(cams.iter().cloned()).collect();
    let class_mixture = priors.get("text:rgb").unwrap();
    let mut booth = fit_prior(&paired, "booth:rgb", Some((class_mixture, s.lambda_class))).unwrap();
    booth.insert(UNCOND, priors.get(UNCOND).unwrap().clone());
    for az_bin in [0usize, 3] {
        for el_bin in [0usize, 1] {
            let token = format!("booth:rgb:az{az_bin}el{el_bin}");
            let mix = booth.get(&token).unwrap();
            let k = az_bin + 8 * el_bin; // dataset order: az bins in order, low ring first
            let fid = img_psnr(&mix.components[0].mean, &gt_at[k], w, h);
            let stats: Vec<String> = mix
                .components
                .iter()
                .map(|c| format!("(w {:.2}, γ {:.3})", c.weight, c.stdev))
                .collect();
            println!("booth {token}: mean-vs-GT PSNR {fid:.2}, comps {}", stats.join(" "));
        }
    }

    // Link 4: inner BSD loop with per-iteration fidelity prints.
    // Env knobs for ablation: TEX_CFG, TEX_LR, TEX_ITERS, TEX_WBSD.
    let env_f64 = |k: &str, d: f64| {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let cfg_tex = env_f64("TEX_CFG", s.cfg_texture);
    let lr_tex = env_f64("TEX_LR", s.eta_scene);
    let iters = env_f64("TEX_ITERS", s.texture_iters_per_round as f64) as usize;
    let w_bsd = env_f64("TEX_WBSD", s.w_bsd);
    let aligned = env_f64("TEX_ALIGNED", 0.0) != 0.0;
    println!("[ablation: cfg={cfg_tex} lr={lr_tex} iters={iters} w_bsd={w_bsd} aligned={aligned}]");

    let reference = lift3d::scenes::reference_camera(w, h);
    let eta_est = env_f64("TEX_ETA", s.eta_estimator);
    let mut estimator = OnlineScoreEstimator::new(dim, eta_est);
    let warm = env_f64("TEX_WARM", 0.0) as i64;
    if warm < 0 {
        // Deterministic warm start: each pose bucket's estimator models the
        // current render at that pose exactly.
        for ((img, _), cam) in renders.iter().zip(&cams) {
            let bucket = view_bucket("booth:rgb", cam.azimuth_deg, cam.elevation_deg);
            estimator.set_params(&bucket, img.clone(), 0.0).unwrap();
        }
    }
    for _ in 0..warm.max(0) {
        for ((img, _), cam) in renders.iter().zip(&cams) {
            let te = rng.gen_range(s.estimator_t_range[0]..s.estimator_t_range[1]);
            let eps_e: Vec<f64> =
                (0..dim).map(|_| rand_distr::StandardNormal.sample_from(&mut rng)).collect();
            let x_te = add_noise(img, te, &eps_e).unwrap();
            let bucket = view_bucket("booth:rgb", cam.azimuth_deg, cam.elevation_deg);
            estimator.update(&x_te, te, &eps_e, &bucket).unwrap();
        }
    }
    let mut adam = Adam::new(color.grid.param_len(), lr_tex);
    let sched = cfg.camera_schedule();
    let ref_render = render_mesh(&mesh, &color, &reference, &RenderMode::Rgb).unwrap();
    println!("before BSD: reference PSNR {:.2}", psnr(&ref_render.rgb, &pack.rgb));

    for iter in 0..iters {
        let draw = sample_camera(&sched, 1.0, &reference, &mut rng);
        let camera = if aligned {
            cams[rng.gen_range(0..cams.len())].clone()
        } else {
            draw.camera.clone()
        };
        let t = sample_timestep(1.0, s.t_range_start, s.t_range_end, &mut rng);
        let out = render_mesh(&mesh, &color, &camera, &RenderMode::Rgb).unwrap();
        if env_f64("TEX_REFRESH", 0.0) != 0.0 {
            let bucket = view_bucket("booth:rgb", camera.azimuth_deg, camera.elevation_deg);
            estimator.set_params(&bucket, out.rgb.data.clone(), 0.0).unwrap();
        }
        let eps: Vec<f64> = (0..dim).map(|_| rand_distr::StandardNormal.sample_from(&mut rng)).collect();
        let g = bsd_grad(&booth, &mut estimator, &out.rgb.data, t, "booth:rgb", &camera, &eps, cfg_tex)
            .unwrap();
        let mut adjoint = RenderAdjoint::zeros(w, h);
        for (a, gi) in adjoint.rgb.data.iter_mut().zip(&g) {
            *a = w_bsd * gi;
        }
        let grads =
            render_mesh_vjp(&mesh, &color, &camera, &RenderMode::Rgb, &adjoint, MeshWrt::Texture).unwrap();
        let mut p = color.grid.params_flat();
        adam.step(&mut p, &grads.texture).unwrap();
        color.grid.set_params_flat(&p).unwrap();

        if env_f64("TEX_NOUP", 0.0) == 0.0 {
            let te = rng.gen_range(s.estimator_t_range[0]..s.estimator_t_range[1]);
            let eps_e: Vec<f64> =
                (0..dim).map(|_| rand_distr::StandardNormal.sample_from(&mut rng)).collect();
            let x_te = add_noise(&out.rgb.data, te, &eps_e).unwrap();
            let bucket = view_bucket("booth:rgb", camera.azimuth_deg, camera.elevation_deg);
            estimator.update(&x_te, te, &eps_e, &bucket).unwrap();
        }

        if iter % 10 == 0 || iter == iters - 1 {
            let r = render_mesh(&mesh, &color, &reference, &RenderMode::Rgb).unwrap();
            let gnorm = (g.iter().map(|v| v * v).sum::<f64>()).sqrt();
            let tnorm = (grads.texture.iter().map(|v| v * v).sum::<f64>()).sqrt();
            println!(
                "iter {iter:3} t={t:.3} az={az:6.1} |g|={gnorm:8.3} |g_tex|={tnorm:8.3} ref PSNR {p:.2}",
                az = camera.azimuth_deg,
                p = psnr(&r.rgb, &pack.rgb)
            );
        }
    }
}

trait SampleFrom {
    fn sample_from(&self, rng: &mut ChaCha8Rng) -> f64;
}
impl SampleFrom for rand_distr::StandardNormal {
    fn sample_from(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(*self)
    }
}
