//! Minimal reverse-mode differentiation over dense tensors.

mod check;
mod ext;
mod nn;
mod params;
mod scalar;
mod tape;
mod tensor;

use alloc::string::String;
use alloc::vec::Vec;

pub use check::{finite_diff_check, reference_diff_check, FdReport, Objective};
pub use ext::F64x2;
pub use nn::{gru_cell, linear, GruWeights};
pub use params::{Gradients, ParamStore, ParamTensor};
pub use scalar::{Precision, Scalar};
pub use tape::{Adjoints, OpKind, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op:?}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: OpKind, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op:?}: axis {axis} out of range for shape {shape:?}")]
    BadAxis { op: OpKind, axis: usize, shape: Vec<usize> },
    #[error("{op:?}: index {index} out of range for extent {len}")]
    IndexOutOfRange { op: OpKind, index: usize, len: usize },
    #[error("{op:?}: no inputs")]
    EmptyInput { op: OpKind },
    #[error("{op:?}: non-finite input")]
    NonFinite { op: OpKind },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("non-finite function value while perturbing `{name}`")]
    NonFiniteValue { name: String },
}
