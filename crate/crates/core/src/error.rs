//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by field queries, renderers, priors, losses and the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid query point (non-finite coordinate)")]
    InvalidQueryPoint,

    #[error("gradient outside domain (point not strictly inside the bounding sphere)")]
    GradientOutsideDomain,

    #[error("primitive exceeds bounding sphere: {0}")]
    PrimitiveOutOfBounds(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid render options: {0}")]
    InvalidRenderOptions(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("unconditioned query: condition {0} not present in prior")]
    UnconditionedQuery(String),

    #[error("timestep {0} outside [0, 1]")]
    InvalidTimestep(f64),

    #[error("degenerate depth (zero variance over masked pixels)")]
    DegenerateDepth,

    #[error("zero-norm normal on a masked pixel")]
    ZeroNormal,

    #[error("dangling vertex {0} has no incident face")]
    DanglingVertex(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite parameter detected: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("container format error: {0}")]
    Container(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
