//! Differentiable-computation substrate.
//!
//! A small reverse-mode tape over dense row-major tensors, generic over the
//! element type so the same model code trains in `f32` and is gradient-checked
//! in `f64`. Only the primitives the scene models need are provided.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, StepOutcome};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{finite_difference_check, param_gradient_check, relative_error};
pub use params::{Ctx, GradAccumulator, ParamId, ParamStore};
pub use tape::{ConvGeometry, GatherTaps, Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

use thiserror::Error;

/// Variance stabilizer inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: missing tensor(s): {}", .0.join(", "))]
    MissingTensors(Vec<String>),
    #[error("checkpoint: tensor {name} has shape {found:?}, model expects {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
