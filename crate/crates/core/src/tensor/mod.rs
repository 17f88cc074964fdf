//! Dense tensors with tape-based reverse-mode differentiation.

mod graph;
pub mod kernels;
mod optim;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{Graph, Padding, PearsonLoss, Var, PEARSON_EPS, STANDARDIZE_EPS};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: usize,
        detail: String,
    },
    #[error("{0}")]
    Usage(String),
}

pub(crate) fn dim_err(op: &'static str, axis: usize, detail: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        axis,
        detail: detail.into(),
    }
}
