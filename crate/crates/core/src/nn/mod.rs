//! Minimal reverse-mode differentiation over a fixed operation set, plus the
//! SGD and AdamW optimizers used on the client and server sides of the
//! federated loop.
//!
//! The op set (matmul, transpose, softmax over rows, relu, sigmoid, add, mul,
//! scale, column concat/slice, mse) is exactly what the attention-based
//! selection network needs; there is no broadcasting and no dynamic graph
//! machinery beyond the tape.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adamw_step, sgd_step, AdamWState, SgdState};
pub use params::{tensor_digest, ModelParams, ParamEntry};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use params::hex_string as hex_digest;
pub(crate) use tape::{mat_mul as tape_mat_mul, sigmoid as stable_sigmoid};

use thiserror::Error;

/// Errors produced by tensor ops, the tape, and the optimizers.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: tensor must be non-empty")]
    EmptyTensor { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("unknown parameter tensor {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter tensor {0:?}")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
