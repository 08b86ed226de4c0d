use lift3d::losses::pearson_depth_loss;
use lift3d::pipeline::SceneState;
use lift3d::render::neus::{render_neus, render_neus_vjp};
use lift3d::render::{RenderAdjoint, RenderOptions};
use lift3d::scenes::{ground_truth, render_reference_pack, ToyScene};

fn main() {
    let gt = ground_truth(ToyScene::Sphere).unwrap();
    let pack = render_reference_pack(&gt, 32, 32, 32).unwrap();
    let state = SceneState::initial().unwrap();
    let opts = RenderOptions { samples_per_ray: 32, ..RenderOptions::default() };
    let out = render_neus(&state.sdf, &state.color, &pack.camera, &opts).unwrap();

    let mut overlap = pack.mask.clone();
    for (m, r) in overlap.data.iter_mut().zip(&out.mask.data) {
        *m = f64::from(*m >= 0.5 && *r >= 0.5);
    }
    for (name, mask) in [("gt-mask", &pack.mask), ("overlap", &overlap)] {
        match pearson_depth_loss(&out.depth, &pack.depth, mask) {
            Ok((l, g)) => {
                let gn: f64 = g.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut adj = RenderAdjoint::zeros(32, 32);
                adj.depth.add_scaled(&g, 0.5).unwrap();
                let grads =
                    render_neus_vjp(&state.sdf, &state.color, &pack.camera, &opts, &adj).unwrap();
                let ns: f64 = grads.sdf.iter().map(|v| v * v).sum::<f64>().sqrt();
                println!("{name}: loss={l:.6} |g_img|={gn:.6e} |g_sdf|={ns:.6e}");
            }
            Err(e) => println!("{name}: error {e}"),
        }
    }
}
