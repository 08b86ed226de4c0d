//! Binary PPM (P6) image output.
//!
//! Values are clamped to [0, 1] and quantized to 8 bits with round-to-nearest,
//! so writing the same buffer twice yields identical bytes.

use crate::error::{Error, Result};
use crate::img::Image;
use std::io::Write;
use std::path::Path;

/// Serializes an RGB image as binary PPM. Single-channel images are
/// broadcast to gray; other channel counts are rejected.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 && img.channels != 1 {
        return Err(Error::Container(format!(
            "PPM output needs 1 or 3 channels, got {}",
            img.channels
        )));
    }
    let mut out = Vec::with_capacity(32 + img.width * img.height * 3);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let ch = if img.channels == 3 { c } else { 0 };
                let v = img.get(x, y, ch).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let bytes = encode_ppm(img)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
