//! Deformable tetrahedral grid and marching-tetrahedra surface extraction.
//!
//! The lattice is body-centered cubic: the corners of a cubic grid plus every
//! cell center. Each interior cell face spawns four tetrahedra spanning the
//! two adjacent cell centers and one face edge, tiling the volume between
//! cell centers. Geometry parameters are a signed distance and a bounded
//! offset per lattice vertex; the surface is re-extracted from scratch after
//! every parameter update (topology is piecewise-constant, vertex positions
//! are differentiable through the crossing parameter λ and the offsets).

use crate::error::{Error, Result};
use crate::fields::{ColorField, SdfField};
use crate::io::{Container, Payload};
use nalgebra::Vector3;
use std::collections::{BTreeMap, HashMap};

/// SDF values within this distance of zero snap to exactly zero before case
/// lookup. Snapped vertices count as outside and edge crossings land exactly
/// on them (λ ∈ {0, 1}), welding away the sliver triangles that would
/// otherwise appear when the surface grazes a lattice vertex.
const SNAP_EPS: f64 = 1e-9;

/// Body-centered-cubic tetrahedral lattice with per-vertex signed distance
/// and bounded position offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct TetGrid {
    pub resolution: usize,
    pub radius: f64,
    /// Base lattice positions: (R+1)³ corners followed by R³ cell centers.
    pub positions: Vec<Vector3<f64>>,
    pub sdf: Vec<f64>,
    pub offsets: Vec<Vector3<f64>>,
}

/// Extracted triangle mesh with per-vertex lattice provenance.
#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    /// One entry per vertex: the lattice edge it lies on.
    pub provenance: Vec<EdgeCrossing>,
}

/// A surface vertex's source: lattice edge (a, b) with a < b, and the
/// interpolation parameter λ ∈ (0, 1) measured from a toward b.
#[derive(Clone, Copy, Debug)]
pub struct EdgeCrossing {
    pub edge: (usize, usize),
    pub lambda: f64,
}

impl TetGrid {
    fn corner_count(resolution: usize) -> usize {
        let n = resolution + 1;
        n * n * n
    }

    pub fn vertex_count(&self) -> usize {
        Self::corner_count(self.resolution) + self.resolution.pow(3)
    }

    fn corner_id(&self, x: usize, y: usize, z: usize) -> usize {
        let n = self.resolution + 1;
        (z * n + y) * n + x
    }

    fn center_id(&self, x: usize, y: usize, z: usize) -> usize {
        let r = self.resolution;
        Self::corner_count(r) + (z * r + y) * r + x
    }

    /// Lattice spacing (corner-to-corner along an axis).
    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / self.resolution as f64
    }

    /// Largest allowed offset magnitude: half the shortest incident lattice
    /// edge (center-to-corner, √3/2 of the spacing), preventing inversion.
    pub fn max_offset(&self) -> f64 {
        self.spacing() * 3.0_f64.sqrt() / 4.0
    }

    /// Fresh lattice with zero SDF and offsets.
    pub fn new(resolution: usize, radius: f64) -> Self {
        let n = resolution + 1;
        let h = 2.0 * radius / resolution as f64;
        let mut positions = Vec::with_capacity(Self::corner_count(resolution) + resolution.pow(3));
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    positions.push(Vector3::new(
                        -radius + x as f64 * h,
                        -radius + y as f64 * h,
                        -radius + z as f64 * h,
                    ));
                }
            }
        }
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    positions.push(Vector3::new(
                        -radius + (x as f64 + 0.5) * h,
                        -radius + (y as f64 + 0.5) * h,
                        -radius + (z as f64 + 0.5) * h,
                    ));
                }
            }
        }
        let count = positions.len();
        TetGrid {
            resolution,
            radius,
            positions,
            sdf: vec![0.0; count],
            offsets: vec![Vector3::zeros(); count],
        }
    }

    /// Lattice positions displaced by their offsets.
    pub fn effective_position(&self, i: usize) -> Vector3<f64> {
        self.positions[i] + self.offsets[i]
    }

    /// Projects every offset back inside the inversion-safe bound.
    pub fn clamp_offsets(&mut self) {
        let max = self.max_offset();
        for off in &mut self.offsets {
            let n = off.norm();
            if n > max {
                *off *= max / n;
            }
        }
    }

    /// Calls `f` with each tetrahedron's four lattice vertex ids, in a fixed
    /// deterministic order. Four tets per interior cell face: the two
    /// adjacent cell centers plus one edge of the shared face.
    pub fn for_each_tet(&self, mut f: impl FnMut([usize; 4])) {
        let r = self.resolution;
        // Faces orthogonal to x.
        for k in 0..r {
            for j in 0..r {
                for i in 0..r - 1 {
                    let a = self.center_id(i, j, k);
                    let b = self.center_id(i + 1, j, k);
                    let q = [
                        self.corner_id(i + 1, j, k),
                        self.corner_id(i + 1, j + 1, k),
                        self.corner_id(i + 1, j + 1, k + 1),
                        self.corner_id(i + 1, j, k + 1),
                    ];
                    for m in 0..4 {
                        f([a, b, q[m], q[(m + 1) % 4]]);
                    }
                }
            }
        }
        // Faces orthogonal to y.
        for k in 0..r {
            for j in 0..r - 1 {
                for i in 0..r {
                    let a = self.center_id(i, j, k);
                    let b = self.center_id(i, j + 1, k);
                    let q = [
                        self.corner_id(i, j + 1, k),
                        self.corner_id(i + 1, j + 1, k),
                        self.corner_id(i + 1, j + 1, k + 1),
                        self.corner_id(i, j + 1, k + 1),
                    ];
                    for m in 0..4 {
                        f([a, b, q[m], q[(m + 1) % 4]]);
                    }
                }
            }
        }
        // Faces orthogonal to z.
        for k in 0..r - 1 {
            for j in 0..r {
                for i in 0..r {
                    let a = self.center_id(i, j, k);
                    let b = self.center_id(i, j, k + 1);
                    let q = [
                        self.corner_id(i, j, k + 1),
                        self.corner_id(i + 1, j, k + 1),
                        self.corner_id(i + 1, j + 1, k + 1),
                        self.corner_id(i, j + 1, k + 1),
                    ];
                    for m in 0..4 {
                        f([a, b, q[m], q[(m + 1) % 4]]);
                    }
                }
            }
        }
    }

    /// All tetrahedra as index 4-tuples.
    pub fn tets(&self) -> Vec<[usize; 4]> {
        let mut out = Vec::new();
        self.for_each_tet(|t| out.push(t));
        out
    }

    /// Barycentric interpolation of the SDF inside the tetrahedron containing
    /// `p`, or `None` when `p` falls outside the tetrahedralized volume (the
    /// half-cell fringe at the cube boundary is not tiled).
    pub fn interp_sdf(&self, p: &Vector3<f64>) -> Option<f64> {
        let r = self.resolution;
        let h = self.spacing();
        let cell = |v: f64| (((v + self.radius) / h).floor() as isize).clamp(0, r as isize - 1) as usize;
        let (ci, cj, ck) = (cell(p.x), cell(p.y), cell(p.z));
        let mut candidates: Vec<[usize; 4]> = Vec::new();
        let mut face = |a: [usize; 3], b: [isize; 3]| {
            if b[0] < 0 || b[1] < 0 || b[2] < 0 {
                return;
            }
            let (bi, bj, bk) = (b[0] as usize, b[1] as usize, b[2] as usize);
            if bi >= r || bj >= r || bk >= r {
                return;
            }
            let ca = self.center_id(a[0], a[1], a[2]);
            let cb = self.center_id(bi, bj, bk);
            // Shared face corners: the face between the two cells.
            let fx = a[0].max(bi);
            let fy = a[1].max(bj);
            let fz = a[2].max(bk);
            let q = if a[0] != bi {
                [
                    self.corner_id(fx, fy, fz),
                    self.corner_id(fx, fy + 1, fz),
                    self.corner_id(fx, fy + 1, fz + 1),
                    self.corner_id(fx, fy, fz + 1),
                ]
            } else if a[1] != bj {
                [
                    self.corner_id(fx, fy, fz),
                    self.corner_id(fx + 1, fy, fz),
                    self.corner_id(fx + 1, fy, fz + 1),
                    self.corner_id(fx, fy, fz + 1),
                ]
            } else {
                [
                    self.corner_id(fx, fy, fz),
                    self.corner_id(fx + 1, fy, fz),
                    self.corner_id(fx + 1, fy + 1, fz),
                    self.corner_id(fx, fy + 1, fz),
                ]
            };
            for m in 0..4 {
                candidates.push([ca, cb, q[m], q[(m + 1) % 4]]);
            }
        };
        let c = [ci, cj, ck];
        let ic = [ci as isize, cj as isize, ck as isize];
        face(c, [ic[0] - 1, ic[1], ic[2]]);
        face(c, [ic[0] + 1, ic[1], ic[2]]);
        face(c, [ic[0], ic[1] - 1, ic[2]]);
        face(c, [ic[0], ic[1] + 1, ic[2]]);
        face(c, [ic[0], ic[1], ic[2] - 1]);
        face(c, [ic[0], ic[1], ic[2] + 1]);

        for t in candidates {
            if let Some(bary) = barycentric(&self.positions, &t, p) {
                return Some((0..4).map(|i| bary[i] * self.sdf[t[i]]).sum());
            }
        }
        None
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        c.insert(&format!("{prefix}/resolution"), Payload::scalar_u64(self.resolution as u64));
        c.insert(&format!("{prefix}/radius"), Payload::scalar_f64(self.radius));
        c.insert(
            &format!("{prefix}/sdf"),
            Payload::F64 { dims: vec![self.sdf.len() as u64], data: self.sdf.clone() },
        );
        let mut flat = Vec::with_capacity(self.offsets.len() * 3);
        for o in &self.offsets {
            flat.extend_from_slice(&[o.x, o.y, o.z]);
        }
        c.insert(
            &format!("{prefix}/offsets"),
            Payload::F64 { dims: vec![self.offsets.len() as u64, 3], data: flat },
        );
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let resolution = c.get(&format!("{prefix}/resolution"))?.as_u64()?[0] as usize;
        let radius = c.get(&format!("{prefix}/radius"))?.as_f64()?[0];
        let mut grid = TetGrid::new(resolution, radius);
        let sdf = c.get(&format!("{prefix}/sdf"))?.as_f64()?;
        if sdf.len() != grid.sdf.len() {
            return Err(Error::Container(format!("section {prefix}/sdf has wrong length")));
        }
        grid.sdf.copy_from_slice(sdf);
        let flat = c.get(&format!("{prefix}/offsets"))?.as_f64()?;
        if flat.len() != grid.offsets.len() * 3 {
            return Err(Error::Container(format!("section {prefix}/offsets has wrong length")));
        }
        for (i, o) in grid.offsets.iter_mut().enumerate() {
            *o = Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
        }
        Ok(grid)
    }
}

fn barycentric(positions: &[Vector3<f64>], tet: &[usize; 4], p: &Vector3<f64>) -> Option<[f64; 4]> {
    let a = positions[tet[0]];
    let m = nalgebra::Matrix3::from_columns(&[
        positions[tet[1]] - a,
        positions[tet[2]] - a,
        positions[tet[3]] - a,
    ]);
    let inv = m.try_inverse()?;
    let b = inv * (p - a);
    let b0 = 1.0 - b.x - b.y - b.z;
    let eps = -1e-9;
    if b0 >= eps && b.x >= eps && b.y >= eps && b.z >= eps {
        Some([b0, b.x, b.y, b.z])
    } else {
        None
    }
}

/// Samples an SDF field onto a fresh lattice; offsets start at zero. Lattice
/// positions outside the bounding sphere pick up the field's positive
/// background distance, so valid fields always yield positive boundary SDF.
pub fn init_grid_from_field(field: &SdfField, resolution: usize) -> Result<TetGrid> {
    let mut grid = TetGrid::new(resolution, field.radius());
    for (i, p) in grid.positions.iter().enumerate() {
        grid.sdf[i] = field.eval(p)?;
    }
    Ok(grid)
}

/// Case table for one tetrahedron: triangles as triples of crossing edges,
/// each edge a pair of local vertex indices (0..4). Signs must be nonzero.
fn tet_case(signs: [bool; 4]) -> Vec<[(usize, usize); 3]> {
    // signs[i] = true means inside (negative SDF).
    let inside: Vec<usize> = (0..4).filter(|&i| signs[i]).collect();
    let outside: Vec<usize> = (0..4).filter(|&i| !signs[i]).collect();
    match inside.len() {
        1 => {
            let v = inside[0];
            vec![[(v, outside[0]), (v, outside[1]), (v, outside[2])]]
        }
        3 => {
            let p = outside[0];
            vec![[(inside[0], p), (inside[1], p), (inside[2], p)]]
        }
        2 => {
            let (n0, n1) = (inside[0], inside[1]);
            let (p0, p1) = (outside[0], outside[1]);
            // Quad cycle: consecutive edges share a tet vertex.
            let q = [(n0, p0), (n0, p1), (n1, p1), (n1, p0)];
            vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
        }
        _ => Vec::new(),
    }
}

/// Welding identity of a crossing: interior of a lattice edge, or exactly a
/// lattice vertex (when its snapped SDF is zero).
#[derive(PartialEq, Eq, Hash)]
enum CrossKey {
    Edge(usize, usize),
    Vert(usize),
}

/// Extracts the zero surface of the lattice SDF. Vertices are welded by
/// lattice edge (or lattice vertex when the surface passes through one);
/// triangles are oriented so normals point toward positive SDF.
pub fn marching_tetrahedra(grid: &TetGrid) -> TriMesh {
    let sdf: Vec<f64> =
        grid.sdf.iter().map(|&v| if v.abs() <= SNAP_EPS { 0.0 } else { v }).collect();

    let mut mesh = TriMesh { vertices: Vec::new(), triangles: Vec::new(), provenance: Vec::new() };
    let mut weld_map: HashMap<CrossKey, usize> = HashMap::new();

    let mut weld = |a: usize, b: usize, mesh: &mut TriMesh| -> usize {
        let (lo, hi) = (a.min(b), a.max(b));
        let (sa, sb) = (sdf[lo], sdf[hi]);
        let lambda = sa / (sa - sb);
        let key = if lambda == 0.0 {
            CrossKey::Vert(lo)
        } else if lambda == 1.0 {
            CrossKey::Vert(hi)
        } else {
            CrossKey::Edge(lo, hi)
        };
        if let Some(&v) = weld_map.get(&key) {
            return v;
        }
        let pa = grid.effective_position(lo);
        let pb = grid.effective_position(hi);
        let idx = mesh.vertices.len();
        mesh.vertices.push(pa * (1.0 - lambda) + pb * lambda);
        mesh.provenance.push(EdgeCrossing { edge: (lo, hi), lambda });
        weld_map.insert(key, idx);
        idx
    };

    grid.for_each_tet(|tet| {
        let signs = [
            sdf[tet[0]] < 0.0,
            sdf[tet[1]] < 0.0,
            sdf[tet[2]] < 0.0,
            sdf[tet[3]] < 0.0,
        ];
        let tris = tet_case(signs);
        if tris.is_empty() {
            return;
        }
        // Crossings of the linear interpolant within one tet are coplanar and
        // separate inside from outside vertices, so the inside centroid is
        // strictly behind every emitted triangle: a robust orientation probe.
        let mut inside_centroid = Vector3::zeros();
        let mut inside_count = 0.0;
        for i in 0..4 {
            if signs[i] {
                inside_centroid += grid.effective_position(tet[i]);
                inside_count += 1.0;
            }
        }
        inside_centroid /= inside_count;

        for tri_edges in tris {
            let ids = [
                weld(tet[tri_edges[0].0], tet[tri_edges[0].1], &mut mesh),
                weld(tet[tri_edges[1].0], tet[tri_edges[1].1], &mut mesh),
                weld(tet[tri_edges[2].0], tet[tri_edges[2].1], &mut mesh),
            ];
            if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                continue; // collapsed onto a snapped lattice vertex
            }
            let (v0, v1, v2) =
                (mesh.vertices[ids[0]], mesh.vertices[ids[1]], mesh.vertices[ids[2]]);
            let normal = (v1 - v0).cross(&(v2 - v0));
            let tri_centroid = (v0 + v1 + v2) / 3.0;
            if normal.dot(&(inside_centroid - tri_centroid)) <= 0.0 {
                mesh.triangles.push(ids);
            } else {
                mesh.triangles.push([ids[0], ids[2], ids[1]]);
            }
        }
    });
    mesh
}

/// Area-weighted per-vertex unit normals.
pub fn mesh_normals(mesh: &TriMesh) -> Result<Vec<Vector3<f64>>> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyInput("mesh".into()));
    }
    let mut acc = vec![Vector3::zeros(); mesh.vertices.len()];
    for t in &mesh.triangles {
        let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        // Cross product length is twice the face area: area weighting for free.
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i] += n;
        }
    }
    acc.iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len < 1e-300 {
                Err(Error::DanglingVertex(i))
            } else {
                Ok(n / len)
            }
        })
        .collect()
}

/// Pulls per-surface-vertex position gradients back to the lattice SDF and
/// offset parameters through each vertex's provenance:
/// v = (1−λ)(p_a+o_a) + λ(p_b+o_b), λ = s_a/(s_a−s_b).
pub fn backprop_vertices(
    grid: &TetGrid,
    mesh: &TriMesh,
    vertex_grads: &[Vector3<f64>],
) -> Result<(Vec<f64>, Vec<Vector3<f64>>)> {
    if vertex_grads.len() != mesh.vertices.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} vertex gradients", mesh.vertices.len()),
            got: format!("{}", vertex_grads.len()),
        });
    }
    let mut sdf_grad = vec![0.0; grid.sdf.len()];
    let mut offset_grad = vec![Vector3::zeros(); grid.offsets.len()];
    for (vi, prov) in mesh.provenance.iter().enumerate() {
        let g = vertex_grads[vi];
        if g == Vector3::zeros() {
            continue;
        }
        let (a, b) = prov.edge;
        let lambda = prov.lambda;
        offset_grad[a] += g * (1.0 - lambda);
        offset_grad[b] += g * lambda;

        let pa = grid.effective_position(a);
        let pb = grid.effective_position(b);
        let dl = g.dot(&(pb - pa));
        let sa = if grid.sdf[a].abs() <= SNAP_EPS { 0.0 } else { grid.sdf[a] };
        let sb = if grid.sdf[b].abs() <= SNAP_EPS { 0.0 } else { grid.sdf[b] };
        let denom = (sa - sb) * (sa - sb);
        sdf_grad[a] += dl * (-sb / denom);
        sdf_grad[b] += dl * (sa / denom);
    }
    Ok((sdf_grad, offset_grad))
}

/// Degree of every undirected mesh edge. Watertight ⇔ all degrees are 2.
pub fn edge_degrees(mesh: &TriMesh) -> BTreeMap<(usize, usize), usize> {
    let mut deg = BTreeMap::new();
    for t in &mesh.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *deg.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    deg
}

pub fn is_watertight(mesh: &TriMesh) -> bool {
    !mesh.triangles.is_empty() && edge_degrees(mesh).values().all(|&d| d == 2)
}

/// V − E + F (2 for sphere topology, 0 for a torus).
pub fn euler_characteristic(mesh: &TriMesh) -> i64 {
    let v = mesh.vertices.len() as i64;
    let e = edge_degrees(mesh).len() as i64;
    let f = mesh.triangles.len() as i64;
    v - e + f
}

/// Divergence-theorem volume; positive for consistently outward orientation.
pub fn signed_volume(mesh: &TriMesh) -> f64 {
    let mut vol = 0.0;
    for t in &mesh.triangles {
        let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        vol += a.dot(&b.cross(&c)) / 6.0;
    }
    vol
}

/// Writes the mesh as OBJ with vertex colors sampled from a color field.
pub fn export_obj(mesh: &TriMesh, color: &ColorField, path: &std::path::Path) -> Result<()> {
    let normals = mesh_normals(mesh)?;
    let colors: Result<Vec<Vector3<f64>>> =
        mesh.vertices.iter().map(|v| color.eval(v)).collect();
    crate::io::obj::write_obj(path, &mesh.vertices, &colors?, &normals, &mesh.triangles)
}
