//! Dense array math with reverse-mode differentiation.
//!
//! Just enough to train the desk-scale model deterministically: a plain
//! row-major [`Tensor`], a [`Tape`] that records forward ops and replays
//! their vector-Jacobian products, an Adam optimizer with linear warmup, and
//! the binary checkpoint format.
//!
//! Training runs in `f32`; gradient checking instantiates the same code at
//! `f64`.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState, LrSchedule, ParamEntry, ParamSet};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use tape::{Axis, Tape, Var};
pub use tensor::{gemm, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
}

impl NumericsError {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        NumericsError::Usage(msg.into())
    }
}
