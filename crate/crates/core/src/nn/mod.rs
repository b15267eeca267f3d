//! Minimal reverse-mode autodiff over `f64` tensors, with exactly the
//! operators the ROI MLPs and 3D ResNets need.

pub mod checkpoint;
pub mod conv;
mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_gradcheck, gradcheck_params};
pub use optim::Adam;
pub use tape::{backward, Mode, Tape, Var};
pub use tensor::{BatchStats, BufferId, ParamId, ParamStore, Parameter, RunningStats, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty output: {0}")]
    EmptyOutput(String),
    #[error("batch norm over a single element in train mode")]
    DegenerateBatch,
    #[error("value was not recorded on this tape")]
    NoTape,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
