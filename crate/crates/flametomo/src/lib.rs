//! Differentiable rendering engine for hyperspectral infrared flame
//! emission tomography.
//!
//! The forward operator renders synthetic FTIR camera measurements from a
//! 3-D temperature/composition field by solving the radiative transfer
//! equation along camera rays and convolving the result with the
//! instrument lineshape. The inverse problem recovers the field by
//! gradient descent through the forward operator, with either a voxel
//! grid or a neural implicit field as the scene representation.

pub mod autodiff;
pub mod config;
pub mod fields;
pub mod geometry;
pub mod neural;
pub mod optimize;
pub mod render;
pub mod spectra;
pub mod voxel;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("evaluation error in primitive '{primitive}': {msg}")]
    Eval { primitive: String, msg: String },
    #[error("non-finite gradient in parameter slice '{slice}'")]
    NonFiniteGradient { slice: String },
    #[error("diverged at epoch {epoch}: loss is not finite (last good checkpoint retained)")]
    Diverged { epoch: usize },
    #[error("usage error")]
    Usage,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
