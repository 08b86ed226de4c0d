//! Desk-scale image-to-3D lifting.
//!
//! Recovers geometry and appearance of a small object from a handful of
//! reference renderings by optimizing neural-field and mesh representations
//! against analytic diffusion priors (score distillation). Everything runs on
//! CPU in f64 with hand-written adjoints, so every gradient in the system can
//! be checked against finite differences.

pub mod camera;
pub mod error;
pub mod fields;
pub mod img;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod priors;
pub mod render;
pub mod scenes;
pub mod tetra;

pub use error::{Error, Result};
pub use img::Image;
