//! Serialization: binary containers, PPM images, OBJ meshes.

pub mod container;
pub mod obj;
pub mod ppm;

pub use container::{Container, Payload};
pub use obj::{encode_obj, write_obj};
pub use ppm::{encode_ppm, write_ppm};
