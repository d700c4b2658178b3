//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates gradients into the recorded nodes
//! and into the [`ParamStore`] accumulators of any parameter leaves.
//!
//! Broadcasting is limited to scalar-with-tensor. Convolution is direct.

mod param;
mod route;
mod tape;
mod tensor;

pub use param::{ParamId, ParamStore, Parameter};
pub use route::{stop_and_route, ROUTE_INPUTS, ROUTE_OUTPUTS};
pub use tape::{Node, OpKind, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("route index out of range: input {input} (max 1), output {output} (max 2)")]
    RouteIndex { input: usize, output: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
