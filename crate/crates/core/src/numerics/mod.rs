//! Dense 64-bit tensors, a reverse-mode tape, and the neural blocks built on it.

mod tensor;
mod tape;
mod params;
pub mod nn;
pub mod gradcheck;

pub use params::{Binder, NamedParam, ParamGrads, ParamId, ParamStore};
pub use tape::{grouped_attention, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("configuration error: {0}")]
    Config(String),
}
