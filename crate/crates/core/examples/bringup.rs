//! Temporary bring-up probe: runs an experiment (scene name or TOML path)
//! and prints stage timings, metrics, and silhouette diagnostics.

use lift3d::img::Image;
use lift3d::pipeline::config::ExperimentConfig;
use lift3d::pipeline::metrics::held_out_cameras;
use lift3d::pipeline::telemetry::Telemetry;
use lift3d::pipeline::run_experiment;
use lift3d::render::{RenderMode, RenderOptions};
use lift3d::scenes::{ground_truth, render_gt};
use std::time::Instant;

fn ascii_mask(ours: &Image, gt: &Image) {
    for y in 0..ours.height {
        let mut line = String::new();
        for x in 0..ours.width {
            let o = ours.get(x, y, 0) >= 0.5;
            let g = gt.get(x, y, 0) >= 0.5;
            line.push(match (o, g) {
                (true, true) => '#',
                (true, false) => '+',
                (false, true) => '.',
                (false, false) => ' ',
            });
        }
        println!("  {line}");
    }
}

fn main() {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "sphere".into());
    let toml = if arg.ends_with(".toml") {
        std::fs::read_to_string(&arg).unwrap()
    } else {
        format!("scene = \"{arg}\"\n")
    };
    let cfg = ExperimentConfig::from_toml(&toml).unwrap();
    let mut tel = Telemetry::in_memory();
    let t0 = Instant::now();
    match run_experiment(&cfg, &mut tel) {
        Ok(out) => {
            println!("total: {:.1}s", t0.elapsed().as_secs_f64());
            println!("after geometry: {:?}", out.after_geometry);
            println!("after texture:  {:?}", out.after_texture);
            for rec in tel.iterations.iter().step_by(40) {
                println!(
                    "  iter {:3} [{}] t={:.3} losses={:?}",
                    rec.iter, rec.phase, rec.t, rec.losses
                );
            }
            let gt = ground_truth(cfg.scene().unwrap()).unwrap();
            let spp = cfg.render.samples_per_ray;
            let opts = RenderOptions { samples_per_ray: spp, ..RenderOptions::default() };
            let renderer = out.state.renderer();
            let held = held_out_cameras(cfg.render.width, cfg.render.height);
            for cam in [&held[0], &held[3]] {
                let ours = renderer.render(cam, &opts).unwrap();
                let truth = render_gt(&gt, cam, spp, RenderMode::Rgb).unwrap();
                println!("view az {} el {} (#=both +=ours .=gt):", cam.azimuth_deg, cam.elevation_deg);
                ascii_mask(&ours.mask, &truth.mask);
            }
        }
        Err(e) => {
            println!("FAILED after {:.1}s: {e}", t0.elapsed().as_secs_f64());
            std::process::exit(1);
        }
    }
}
