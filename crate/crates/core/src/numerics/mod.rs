//! Dense f64 tensors, a recording graph for reverse-mode gradients, and a
//! central-difference gradient checker.

mod fdcheck;
mod graph;
mod tensor;

pub use fdcheck::{fd_check, FdReport, DEFAULT_FD_EPS};
pub use graph::{gelu_scalar, std_normal_cdf, GradFault, Graph, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("attention mask row {row} permits no column")]
    EmptyMaskRow { row: usize },
    #[error("target id {target} outside vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("row {row} has near-zero norm")]
    NearZeroNorm { row: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

#[cfg(test)]
mod tests;
