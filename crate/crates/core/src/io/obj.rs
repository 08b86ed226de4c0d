//! Wavefront OBJ export with per-vertex colors.
//!
//! Colors ride on the `v` line as a widely supported extension
//! (`v x y z r g b`). Numbers are printed with nine fractional digits so the
//! output is deterministic and round-trips f64 values well below any
//! geometric tolerance used elsewhere.

use crate::error::{Error, Result};
use nalgebra::Vector3;
use std::fmt::Write as _;
use std::path::Path;

pub fn encode_obj(
    vertices: &[Vector3<f64>],
    colors: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    faces: &[[usize; 3]],
) -> Result<String> {
    if colors.len() != vertices.len() || normals.len() != vertices.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} colors and normals", vertices.len()),
            got: format!("{} colors, {} normals", colors.len(), normals.len()),
        });
    }
    let mut out = String::new();
    out.push_str("# exported surface mesh\n");
    for (v, c) in vertices.iter().zip(colors) {
        writeln!(
            out,
            "v {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            v.x, v.y, v.z, c.x, c.y, c.z
        )
        .expect("string write");
    }
    for n in normals {
        writeln!(out, "vn {:.9} {:.9} {:.9}", n.x, n.y, n.z).expect("string write");
    }
    for f in faces {
        for &i in f {
            if i >= vertices.len() {
                return Err(Error::DanglingVertex(i));
            }
        }
        // OBJ indices are 1-based; vertex and normal arrays are parallel.
        writeln!(
            out,
            "f {}//{} {}//{} {}//{}",
            f[0] + 1,
            f[0] + 1,
            f[1] + 1,
            f[1] + 1,
            f[2] + 1,
            f[2] + 1
        )
        .expect("string write");
    }
    Ok(out)
}

pub fn write_obj(
    path: &Path,
    vertices: &[Vector3<f64>],
    colors: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    faces: &[[usize; 3]],
) -> Result<()> {
    let text = encode_obj(vertices, colors, normals, faces)?;
    std::fs::write(path, text)?;
    Ok(())
}
