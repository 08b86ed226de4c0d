//! Ray-cast triangle-mesh renderer with reverse-mode gradients.
//!
//! Rasterization is hard: each pixel takes the nearest ray–triangle
//! intersection found through a BVH, the mask is exactly 0 or 1, and
//! silhouette coverage is not differentiated. Gradients flow through the
//! values of hit pixels only — texture lookups at hit points (always) and hit
//! position / face normal with respect to vertex positions (fixed topology).

use crate::camera::{Camera, Ray};
use crate::error::Result;
use crate::fields::ColorField;
use crate::render::{
    lambert_shade, parallel_accumulate, RenderAdjoint, RenderMode, RenderOutput, LAMBERT_AMBIENT,
};
use crate::tetra::TriMesh;
use nalgebra::Vector3;
use rayon::prelude::*;

/// Rays must travel at least this far before a hit counts, so surfaces
/// touching the origin of secondary queries don't self-intersect.
const T_MIN: f64 = 1e-9;

const LEAF_SIZE: usize = 4;

/// Axis-aligned bounding volume hierarchy over mesh triangles.
pub struct Bvh {
    nodes: Vec<BvhNode>,
    /// Triangle indices, permuted so each leaf owns a contiguous range.
    order: Vec<usize>,
}

struct BvhNode {
    bb_min: Vector3<f64>,
    bb_max: Vector3<f64>,
    /// Child node ids for inner nodes; `start..start+count` into `order`
    /// for leaves (count > 0).
    left: usize,
    right: usize,
    start: usize,
    count: usize,
}

/// Median-split BVH build; deterministic for a given mesh.
pub fn build_bvh(mesh: &TriMesh) -> Bvh {
    let mut bvh = Bvh { nodes: Vec::new(), order: Vec::new() };
    if mesh.triangles.is_empty() {
        return bvh;
    }
    let centroids: Vec<Vector3<f64>> = mesh
        .triangles
        .iter()
        .map(|t| (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0)
        .collect();
    let mut idxs: Vec<usize> = (0..mesh.triangles.len()).collect();
    build_node(mesh, &centroids, &mut idxs, &mut bvh);
    bvh
}

fn tri_bounds(mesh: &TriMesh, tri: usize) -> (Vector3<f64>, Vector3<f64>) {
    let t = mesh.triangles[tri];
    let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
    (a.inf(&b).inf(&c), a.sup(&b).sup(&c))
}

fn build_node(
    mesh: &TriMesh,
    centroids: &[Vector3<f64>],
    idxs: &mut [usize],
    bvh: &mut Bvh,
) -> usize {
    let mut bb_min = Vector3::repeat(f64::INFINITY);
    let mut bb_max = Vector3::repeat(f64::NEG_INFINITY);
    for &i in idxs.iter() {
        let (lo, hi) = tri_bounds(mesh, i);
        bb_min = bb_min.inf(&lo);
        bb_max = bb_max.sup(&hi);
    }
    let node_id = bvh.nodes.len();
    bvh.nodes.push(BvhNode { bb_min, bb_max, left: 0, right: 0, start: 0, count: 0 });

    if idxs.len() <= LEAF_SIZE {
        bvh.nodes[node_id].start = bvh.order.len();
        bvh.nodes[node_id].count = idxs.len();
        bvh.order.extend_from_slice(idxs);
        return node_id;
    }
    // Split on the widest axis of the centroid cloud at the median.
    let mut c_min = Vector3::repeat(f64::INFINITY);
    let mut c_max = Vector3::repeat(f64::NEG_INFINITY);
    for &i in idxs.iter() {
        c_min = c_min.inf(&centroids[i]);
        c_max = c_max.sup(&centroids[i]);
    }
    let extent = c_max - c_min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    idxs.sort_by(|&a, &b| {
        centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
    });
    let mid = idxs.len() / 2;
    let (lo, hi) = idxs.split_at_mut(mid);
    let left = build_node(mesh, centroids, lo, bvh);
    let right = build_node(mesh, centroids, hi, bvh);
    bvh.nodes[node_id].left = left;
    bvh.nodes[node_id].right = right;
    node_id
}

fn ray_box(ray: &Ray, lo: &Vector3<f64>, hi: &Vector3<f64>, t_best: f64) -> bool {
    let mut t0 = T_MIN;
    let mut t1 = t_best;
    for a in 0..3 {
        let inv = 1.0 / ray.dir[a];
        let (mut ta, mut tb) = ((lo[a] - ray.origin[a]) * inv, (hi[a] - ray.origin[a]) * inv);
        if inv < 0.0 {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Möller–Trumbore; returns (t, u, v) with u along v1−v0 and v along v2−v0.
fn intersect_tri(mesh: &TriMesh, tri: usize, ray: &Ray) -> Option<(f64, f64, f64)> {
    let t = mesh.triangles[tri];
    let v0 = mesh.vertices[t[0]];
    let e1 = mesh.vertices[t[1]] - v0;
    let e2 = mesh.vertices[t[2]] - v0;
    let pvec = ray.dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = ray.origin.coords - v0;
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = ray.dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let thit = e2.dot(&qvec) * inv;
    (thit > T_MIN).then_some((thit, u, v))
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    tri: usize,
    t: f64,
    /// Barycentric coordinates along the two triangle edges; the adjoint
    /// pass recomputes what it needs, but interior-pixel selection wants them.
    #[allow(dead_code)]
    u: f64,
    #[allow(dead_code)]
    v: f64,
}

/// Nearest hit along the ray; ties on t resolve to the lower triangle id so
/// results do not depend on traversal order.
fn trace(mesh: &TriMesh, bvh: &Bvh, ray: &Ray) -> Option<Hit> {
    if bvh.nodes.is_empty() {
        return None;
    }
    let mut best: Option<Hit> = None;
    let mut stack = [0usize; 64];
    let mut top = 0;
    stack[top] = 0;
    top += 1;
    while top > 0 {
        top -= 1;
        let node = &bvh.nodes[stack[top]];
        let t_best = best.map_or(f64::INFINITY, |h| h.t);
        if !ray_box(ray, &node.bb_min, &node.bb_max, t_best) {
            continue;
        }
        if node.count > 0 {
            for &tri in &bvh.order[node.start..node.start + node.count] {
                if let Some((t, u, v)) = intersect_tri(mesh, tri, ray) {
                    let closer = match best {
                        None => true,
                        Some(h) => t < h.t || (t == h.t && tri < h.tri),
                    };
                    if closer {
                        best = Some(Hit { tri, t, u, v });
                    }
                }
            }
        } else {
            stack[top] = node.left;
            stack[top + 1] = node.right;
            top += 2;
        }
    }
    best
}

/// Unit face normal of a stored (outward-wound) triangle.
fn face_normal(mesh: &TriMesh, tri: usize) -> Vector3<f64> {
    let t = mesh.triangles[tri];
    let e1 = mesh.vertices[t[1]] - mesh.vertices[t[0]];
    let e2 = mesh.vertices[t[2]] - mesh.vertices[t[0]];
    e1.cross(&e2).normalize()
}

fn shade_hit(
    mesh: &TriMesh,
    texture: &ColorField,
    ray: &Ray,
    hit: &Hit,
    mode: &RenderMode,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let normal = face_normal(mesh, hit.tri);
    let rgb = match mode {
        RenderMode::Rgb => texture.eval(&ray.at(hit.t).coords)?,
        RenderMode::NormalMap => (normal + Vector3::new(1.0, 1.0, 1.0)) / 2.0,
        RenderMode::Lambertian { light_dir } => {
            texture.eval(&ray.at(hit.t).coords)? * lambert_shade(&normal, light_dir)
        }
    };
    Ok((rgb, normal))
}

fn miss_color(texture: &ColorField, mode: &RenderMode) -> Vector3<f64> {
    match mode {
        RenderMode::NormalMap => Vector3::new(0.5, 0.5, 0.5),
        _ => texture.background,
    }
}

/// Renders the mesh with per-pixel nearest-hit ray casting. The mask is
/// exactly 1 where a triangle was hit (depth = hit distance) and exactly 0
/// elsewhere; normals are unit face normals.
pub fn render_mesh(
    mesh: &TriMesh,
    texture: &ColorField,
    camera: &Camera,
    mode: &RenderMode,
) -> Result<RenderOutput> {
    let bvh = build_bvh(mesh);
    let rays = camera.generate_rays()?;
    let pixels: Result<Vec<(Vector3<f64>, f64, Vector3<f64>, f64)>> = rays
        .par_iter()
        .map(|ray| match trace(mesh, &bvh, ray) {
            Some(hit) => {
                let (rgb, normal) = shade_hit(mesh, texture, ray, &hit, mode)?;
                Ok((rgb, hit.t, normal, 1.0))
            }
            None => Ok((miss_color(texture, mode), 0.0, Vector3::zeros(), 0.0)),
        })
        .collect();
    let pixels = pixels?;

    let mut out = RenderOutput::new(camera.width, camera.height);
    for (i, (rgb, depth, normal, mask)) in pixels.into_iter().enumerate() {
        let (x, y) = (i % camera.width, i / camera.width);
        for c in 0..3 {
            out.rgb.set(x, y, c, rgb[c]);
            out.normal.set(x, y, c, normal[c]);
        }
        out.depth.set(x, y, 0, depth);
        out.mask.set(x, y, 0, mask);
    }
    Ok(out)
}

/// Which parameters a mesh VJP should populate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeshWrt {
    Texture,
    Vertices,
    Both,
}

/// Reverse-mode gradients from a mesh render.
pub struct MeshGradients {
    /// One entry per texture grid parameter (flat layout).
    pub texture: Vec<f64>,
    /// One entry per mesh vertex.
    pub vertices: Vec<Vector3<f64>>,
}

/// Exact VJP of `render_mesh` for the requested parameter set. Coverage is
/// not differentiated: mask adjoints and silhouette motion contribute
/// nothing, matching the hard rasterization model.
pub fn render_mesh_vjp(
    mesh: &TriMesh,
    texture: &ColorField,
    camera: &Camera,
    mode: &RenderMode,
    adjoint: &RenderAdjoint,
    wrt: MeshWrt,
) -> Result<MeshGradients> {
    adjoint.check_shape(camera.width, camera.height)?;
    let bvh = build_bvh(mesh);
    let rays = camera.generate_rays()?;
    let tex_len = texture.grid.param_len();
    let want_tex = matches!(wrt, MeshWrt::Texture | MeshWrt::Both);
    let want_vert = matches!(wrt, MeshWrt::Vertices | MeshWrt::Both);

    let grads = parallel_accumulate(
        rays.len(),
        8,
        || MeshGradients {
            texture: vec![0.0; tex_len],
            vertices: vec![Vector3::zeros(); mesh.vertices.len()],
        },
        |acc, pix| {
            let ray = &rays[pix];
            let Some(hit) = trace(mesh, &bvh, ray) else {
                return; // miss pixels are constant in all parameters
            };
            let (x, y) = (pix % camera.width, pix / camera.width);
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
            backprop_hit(
                mesh, texture, ray, &hit, mode,
                (a_rgb, a_depth, a_normal_buf),
                want_tex, want_vert, acc,
            );
        },
        |total, part| {
            for (a, b) in total.texture.iter_mut().zip(&part.texture) {
                *a += b;
            }
            for (a, b) in total.vertices.iter_mut().zip(&part.vertices) {
                *a += b;
            }
        },
    );
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backprop_hit(
    mesh: &TriMesh,
    texture: &ColorField,
    ray: &Ray,
    hit: &Hit,
    mode: &RenderMode,
    adjoints: (Vector3<f64>, f64, Vector3<f64>),
    want_tex: bool,
    want_vert: bool,
    acc: &mut MeshGradients,
) {
    let (a_rgb, a_depth, a_normal_buf) = adjoints;
    let tri = mesh.triangles[hit.tri];
    let v0 = mesh.vertices[tri[0]];
    let e1 = mesh.vertices[tri[1]] - v0;
    let e2 = mesh.vertices[tri[2]] - v0;
    let n_raw = e1.cross(&e2);
    let n_len = n_raw.norm();
    let n_hat = n_raw / n_len;
    let p = ray.at(hit.t).coords;
    let inside = p.norm() < texture.grid.radius;

    // Adjoints w.r.t. the unit normal and the hit distance t accumulate from
    // every output the mode touches.
    let mut a_nhat = a_normal_buf;
    let mut a_t = a_depth;

    // Texture color adjoint per mode (zero for normal-map renders).
    let a_tex = match mode {
        RenderMode::Rgb => a_rgb,
        RenderMode::NormalMap => {
            a_nhat += a_rgb / 2.0;
            Vector3::zeros()
        }
        RenderMode::Lambertian { light_dir } => {
            let shade = lambert_shade(&n_hat, light_dir);
            if let Ok(tex) = texture.eval(&p) {
                let a_shade = a_rgb.dot(&tex);
                if n_hat.dot(light_dir) > 0.0 {
                    a_nhat += light_dir * (a_shade * (1.0 - LAMBERT_AMBIENT));
                }
            }
            a_rgb * shade
        }
    };

    if a_tex != Vector3::zeros() && inside {
        if let Ok(raw) = texture.eval_unclamped(&p) {
            let mut a_p = Vector3::zeros();
            for c in 0..3 {
                // The [0,1] clamp gates gradients at saturated channels.
                if raw[c] > 0.0 && raw[c] < 1.0 && a_tex[c] != 0.0 {
                    if want_tex {
                        texture.grid.scatter_value(&p, c, a_tex[c], &mut acc.texture);
                    }
                    if want_vert {
                        a_p += texture.grid.grad_raw(&p, c) * a_tex[c];
                    }
                }
            }
            // p = origin + t·dir, so position adjoints fold into t.
            a_t += a_p.dot(&ray.dir);
        }
    }

    if !want_vert {
        return;
    }

    // t = ((v0 − o)·N) / (d·N) with N = e1×e2 (plane form; same t as the
    // traversal's intersection test).
    let num = (v0 - ray.origin.coords).dot(&n_raw);
    let den = ray.dir.dot(&n_raw);
    let mut a_n = Vector3::zeros();
    let mut a_v0 = Vector3::zeros();
    if a_t != 0.0 {
        let a_num = a_t / den;
        let a_den = -a_t * num / (den * den);
        a_v0 += n_raw * a_num;
        a_n += (v0 - ray.origin.coords) * a_num + ray.dir * a_den;
    }
    // Normalization: dn̂ = (I − n̂n̂ᵀ) dN / ‖N‖.
    a_n += (a_nhat - n_hat * n_hat.dot(&a_nhat)) / n_len;

    // Cross product: N = e1×e2 ⇒ a_e1 = e2×a_N, a_e2 = a_N×e1.
    let a_e1 = e2.cross(&a_n);
    let a_e2 = a_n.cross(&e1);
    acc.vertices[tri[0]] += a_v0 - a_e1 - a_e2;
    acc.vertices[tri[1]] += a_e1;
    acc.vertices[tri[2]] += a_e2;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{init_field, FieldInit, MultiGrid, Primitive};
    use crate::render::{RenderOptions, RenderAdjoint};
    use crate::tetra::{init_grid_from_field, marching_tetrahedra, EdgeCrossing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_texture(color: Vector3<f64>, background: Vector3<f64>) -> ColorField {
        let mut grid = MultiGrid::new(3, 2.0, &[4]);
        grid.fill(|_, _| vec![color.x, color.y, color.z]);
        ColorField { grid, background }
    }

    fn random_texture(rng: &mut ChaCha8Rng, resolutions: &[usize]) -> ColorField {
        let mut grid = MultiGrid::new(3, 2.0, resolutions);
        grid.fill(|_, _| {
            vec![rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)]
        });
        ColorField { grid, background: Vector3::new(1.0, 1.0, 1.0) }
    }

    fn sphere_mesh(radius: f64, resolution: usize) -> TriMesh {
        let prims = [Primitive::Sphere { center: Vector3::zeros(), radius }];
        let (sdf, _) =
            init_field(&prims, &|_| Vector3::new(0.5, 0.5, 0.5), &FieldInit::default()).unwrap();
        let grid = init_grid_from_field(&sdf, resolution).unwrap();
        marching_tetrahedra(&grid)
    }

    fn ref_camera(width: usize, height: usize) -> Camera {
        Camera::orbit(nalgebra::Point3::origin(), 0.0, 15.0, 3.3, 20.0, width, height)
    }

    fn square_mesh(half: f64) -> TriMesh {
        // Two triangles spanning [−half, half]² at z = 0, normals +z.
        TriMesh {
            vertices: vec![
                Vector3::new(-half, -half, 0.0),
                Vector3::new(half, -half, 0.0),
                Vector3::new(half, half, 0.0),
                Vector3::new(-half, half, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            provenance: vec![EdgeCrossing { edge: (0, 1), lambda: 0.5 }; 4],
        }
    }

    #[test]
    fn empty_mesh_renders_background() {
        let mesh = TriMesh { vertices: vec![], triangles: vec![], provenance: vec![] };
        let tex = constant_texture(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.2, 0.4, 0.6));
        let cam = ref_camera(8, 8);
        let out = render_mesh(&mesh, &tex, &cam, &RenderMode::Rgb).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.mask.get(x, y, 0), 0.0);
                assert_eq!(out.depth.get(x, y, 0), 0.0);
                assert_eq!(out.rgb.get(x, y, 0), 0.2);
                assert_eq!(out.rgb.get(x, y, 2), 0.6);
            }
        }
    }

    #[test]
    fn full_view_square_is_all_red() {
        let mesh = square_mesh(1.0);
        let tex = constant_texture(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        // Straight-on camera; FOV 20° at distance 2 covers ±0.35, inside the square.
        let cam =
            Camera::orbit(nalgebra::Point3::origin(), 0.0, 0.0, 2.0, 20.0, 16, 16);
        let out = render_mesh(&mesh, &tex, &cam, &RenderMode::Rgb).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(out.mask.get(x, y, 0), 1.0, "pixel ({x},{y}) should be covered");
                assert!((out.rgb.get(x, y, 0) - 1.0).abs() < 1e-12);
                assert!(out.rgb.get(x, y, 1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_is_exactly_depth_support() {
        let mesh = sphere_mesh(0.45, 16);
        let tex = constant_texture(Vector3::new(0.5, 0.5, 0.5), Vector3::zeros());
        let cam = ref_camera(32, 32);
        let out = render_mesh(&mesh, &tex, &cam, &RenderMode::Rgb).unwrap();
        let mut hits = 0;
        for y in 0..32 {
            for x in 0..32 {
                let m = out.mask.get(x, y, 0);
                assert!(m == 0.0 || m == 1.0, "hard mask");
                assert_eq!(m == 1.0, out.depth.get(x, y, 0) > 0.0);
                if m == 1.0 {
                    hits += 1;
                    let n = Vector3::new(
                        out.normal.get(x, y, 0),
                        out.normal.get(x, y, 1),
                        out.normal.get(x, y, 2),
                    );
                    assert!((n.norm() - 1.0).abs() < 1e-9, "unit normals on hits");
                }
            }
        }
        assert!(hits > 100, "sphere should cover a fair patch at this framing");
    }

    #[test]
    fn cross_renderer_mask_agreement() {
        // Sharp ground-truth field so the volume render's silhouette is crisp.
        let prims = [Primitive::Sphere { center: Vector3::zeros(), radius: 0.45 }];
        let opts_field = FieldInit { steepness: 256.0, ..FieldInit::default() };
        let (sdf, color) =
            init_field(&prims, &|_| Vector3::new(0.5, 0.5, 0.5), &opts_field).unwrap();
        let cam = ref_camera(64, 64);
        let opts = RenderOptions { samples_per_ray: 64, ..RenderOptions::default() };
        let vol = crate::render::neus::render_neus(&sdf, &color, &cam, &opts).unwrap();

        let grid = init_grid_from_field(&sdf, 32).unwrap();
        let mesh = marching_tetrahedra(&grid);
        let surf = render_mesh(&mesh, &color, &cam, &RenderMode::Rgb).unwrap();

        let mut agree = 0;
        for i in 0..64 * 64 {
            let (x, y) = (i % 64, i / 64);
            let a = vol.mask.get(x, y, 0) > 0.5;
            let b = surf.mask.get(x, y, 0) > 0.5;
            if a == b {
                agree += 1;
            }
        }
        let frac = agree as f64 / (64.0 * 64.0);
        assert!(frac >= 0.98, "mask agreement {frac}");
    }

    #[test]
    fn projective_invariance_under_uniform_scale() {
        let mesh = sphere_mesh(0.45, 16);
        let tex = constant_texture(Vector3::new(0.7, 0.3, 0.2), Vector3::new(1.0, 1.0, 1.0));
        let cam = ref_camera(24, 24);
        let out = render_mesh(&mesh, &tex, &cam, &RenderMode::NormalMap).unwrap();

        let scaled = TriMesh {
            vertices: mesh.vertices.iter().map(|v| v * 2.0).collect(),
            triangles: mesh.triangles.clone(),
            provenance: mesh.provenance.clone(),
        };
        let cam2 =
            Camera::orbit(nalgebra::Point3::origin(), 0.0, 15.0, 6.6, 20.0, 24, 24);
        let out2 = render_mesh(&scaled, &tex, &cam2, &RenderMode::NormalMap).unwrap();
        for i in 0..out.rgb.data.len() {
            assert!((out.rgb.data[i] - out2.rgb.data[i]).abs() < 1e-6);
        }
        for i in 0..out.mask.data.len() {
            assert!((out.mask.data[i] - out2.mask.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mesh = sphere_mesh(0.45, 16);
        let bvh = build_bvh(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..500 {
            let origin = nalgebra::Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(2.0..3.0),
            );
            let target = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let ray = Ray { origin, dir: (target - origin.coords).normalize() };
            let fast = trace(&mesh, &bvh, &ray);
            let mut brute: Option<Hit> = None;
            for tri in 0..mesh.triangles.len() {
                if let Some((t, u, v)) = intersect_tri(&mesh, tri, &ray) {
                    let closer = match brute {
                        None => true,
                        Some(h) => t < h.t || (t == h.t && tri < h.tri),
                    };
                    if closer {
                        brute = Some(Hit { tri, t, u, v });
                    }
                }
            }
            match (fast, brute) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.tri, b.tri);
                    assert_eq!(a.t, b.t);
                }
                other => panic!("bvh/brute disagree: {other:?}"),
            }
        }
    }

    #[test]
    fn zero_adjoint_zero_gradients() {
        let mesh = sphere_mesh(0.45, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tex = random_texture(&mut rng, &[8]);
        let cam = ref_camera(12, 12);
        let adj = RenderAdjoint::zeros(12, 12);
        let g = render_mesh_vjp(&mesh, &tex, &cam, &RenderMode::Rgb, &adj, MeshWrt::Both)
            .unwrap();
        assert!(g.texture.iter().all(|&v| v == 0.0));
        assert!(g.vertices.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn empty_mesh_vjp_is_zero() {
        let mesh = TriMesh { vertices: vec![], triangles: vec![], provenance: vec![] };
        let tex = constant_texture(Vector3::new(0.5, 0.5, 0.5), Vector3::zeros());
        let cam = ref_camera(8, 8);
        let mut adj = RenderAdjoint::zeros(8, 8);
        adj.rgb.data.fill(1.0);
        let g = render_mesh_vjp(&mesh, &tex, &cam, &RenderMode::Rgb, &adj, MeshWrt::Both)
            .unwrap();
        assert!(g.texture.iter().all(|&v| v == 0.0));
        assert!(g.vertices.is_empty());
    }

    #[test]
    fn texture_vjp_linear_in_adjoint() {
        let mesh = sphere_mesh(0.45, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tex = random_texture(&mut rng, &[8]);
        let cam = ref_camera(12, 12);
        let mut adj_a = RenderAdjoint::zeros(12, 12);
        let mut adj_b = RenderAdjoint::zeros(12, 12);
        let mut adj_sum = RenderAdjoint::zeros(12, 12);
        for i in 0..adj_a.rgb.data.len() {
            adj_a.rgb.data[i] = rng.gen_range(-1.0..1.0);
            adj_b.rgb.data[i] = rng.gen_range(-1.0..1.0);
            adj_sum.rgb.data[i] = adj_a.rgb.data[i] + adj_b.rgb.data[i];
        }
        let mode = RenderMode::Rgb;
        let ga = render_mesh_vjp(&mesh, &tex, &cam, &mode, &adj_a, MeshWrt::Texture).unwrap();
        let gb = render_mesh_vjp(&mesh, &tex, &cam, &mode, &adj_b, MeshWrt::Texture).unwrap();
        let gs = render_mesh_vjp(&mesh, &tex, &cam, &mode, &adj_sum, MeshWrt::Texture).unwrap();
        for i in 0..gs.texture.len() {
            assert!((gs.texture[i] - ga.texture[i] - gb.texture[i]).abs() < 1e-9);
        }
    }

    fn random_adjoint(rng: &mut ChaCha8Rng, w: usize, h: usize, with_aux: bool) -> RenderAdjoint {
        let mut adj = RenderAdjoint::zeros(w, h);
        for v in adj.rgb.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        if with_aux {
            for v in adj.depth.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            for v in adj.normal.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        adj
    }

    #[test]
    fn texture_vjp_matches_finite_differences() {
        let mesh = sphere_mesh(0.45, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tex = random_texture(&mut rng, &[16]);
        let cam = ref_camera(16, 16);
        for mode in [
            RenderMode::Rgb,
            RenderMode::Lambertian { light_dir: Vector3::new(0.0, 0.0, 1.0) },
        ] {
            let adj = random_adjoint(&mut rng, 16, 16, false);
            let g = render_mesh_vjp(&mesh, &tex, &cam, &mode, &adj, MeshWrt::Texture).unwrap();

            let params = tex.grid.params_flat();
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for _ in 0..24 {
                let dir: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let analytic: f64 = g.texture.iter().zip(&dir).map(|(a, d)| a * d).sum();
                let eval = |sign: f64| -> f64 {
                    let mut t2 = tex.clone();
                    let p2: Vec<f64> =
                        params.iter().zip(&dir).map(|(p, d)| p + sign * h * d).collect();
                    t2.grid.set_params_flat(&p2).unwrap();
                    adj.contract(&render_mesh(&mesh, &t2, &cam, &mode).unwrap())
                };
                let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-9);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-3, "mode {mode:?}: max relative error {max_rel}");
        }
    }

    #[test]
    fn vertex_vjp_matches_finite_differences_on_interior_pixels() {
        let mesh = sphere_mesh(0.45, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tex = random_texture(&mut rng, &[8]);
        let cam = ref_camera(16, 16);
        let bvh = build_bvh(&mesh);
        let rays = cam.generate_rays().unwrap();
        let mode = RenderMode::Lambertian { light_dir: Vector3::new(0.0, 0.0, 1.0) };

        // Keep only pixels whose hit sits well inside its triangle (so small
        // vertex motion never flips coverage or the hit triangle) and away
        // from the shading kink at the terminator and from texture cell
        // faces, where the render is not differentiable.
        let light = Vector3::new(0.0, 0.0, 1.0);
        let mut adj = random_adjoint(&mut rng, 16, 16, true);
        let mut interior = 0;
        for (i, ray) in rays.iter().enumerate() {
            let (x, y) = (i % 16, i / 16);
            let keep = trace(&mesh, &bvh, ray)
                .map(|hit| {
                    let w = 1.0 - hit.u - hit.v;
                    let n = face_normal(&mesh, hit.tri);
                    let p = ray.at(hit.t).coords;
                    let res = 8.0; // texture grid resolution used below
                    let off_cell_faces = (0..3).all(|a| {
                        let u = (p[a] + 2.0) * res / 4.0;
                        (u - u.round()).abs() > 1e-3
                    });
                    hit.u.min(hit.v).min(w) >= 0.05
                        && n.dot(&light).abs() > 0.05
                        && off_cell_faces
                })
                .unwrap_or(false);
            if keep {
                interior += 1;
            } else {
                for c in 0..3 {
                    adj.rgb.set(x, y, c, 0.0);
                    adj.normal.set(x, y, c, 0.0);
                }
                adj.depth.set(x, y, 0, 0.0);
            }
        }
        assert!(interior > 40, "need a useful number of interior pixels, got {interior}");

        let g = render_mesh_vjp(&mesh, &tex, &cam, &mode, &adj, MeshWrt::Vertices).unwrap();
        let h = 1e-6;
        let mut max_rel: f64 = 0.0;
        for _ in 0..16 {
            let dirs: Vec<Vector3<f64>> = (0..mesh.vertices.len())
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let analytic: f64 = g.vertices.iter().zip(&dirs).map(|(a, d)| a.dot(d)).sum();
            let eval = |sign: f64| -> f64 {
                let moved = TriMesh {
                    vertices: mesh
                        .vertices
                        .iter()
                        .zip(&dirs)
                        .map(|(v, d)| v + d * (sign * h))
                        .collect(),
                    triangles: mesh.triangles.clone(),
                    provenance: mesh.provenance.clone(),
                };
                adj.contract(&render_mesh(&moved, &tex, &cam, &mode).unwrap())
            };
            let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-2, "max relative error {max_rel}");
    }
}
