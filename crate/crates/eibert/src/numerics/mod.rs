//! Dense tensor arithmetic, loss primitives, reverse-mode gradients, and a
//! finite-difference gradient oracle.

pub mod check;
pub mod ops;
pub mod precision;
pub mod tape;
pub mod tensor;

pub use check::{finite_diff_check, SamplePlan};
pub use ops::{cross_entropy, kl_divergence, mse, softmax_rows};
pub use precision::{precision, set_precision, with_precision, Precision};
pub use tape::{GradTape, Gradients, NodeId, ParamSlot};
pub use tensor::{IntTensor, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("stale tape: node {0} was not recorded on this tape")]
    StaleTape(usize),
    #[error("loss node must be scalar")]
    NonScalarLoss,
    #[error("int8 value {0} outside [-127, 127]")]
    IntRange(i32),
}
