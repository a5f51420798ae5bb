//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod attention;
mod gradcheck;
mod ops;
mod param;
mod tensor;

pub use attention::attention;
pub use gradcheck::{grad_check, GradCheckReport, InputCheck};
pub use ops::{concat, gelu, sigmoid, LAYER_NORM_EPS};
pub use param::Parameter;
pub use tensor::{inject_fault, no_grad, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank-{rank} tensor in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
