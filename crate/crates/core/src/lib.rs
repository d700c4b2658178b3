//! Multimodal detection toolkit: a reverse-mode tape, a two-branch
//! detector with gradient routing, synthetic paired-modality data, and the
//! training, probing and evaluation harness around them.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix
//! it to `f64`, which the harness and CLI use throughout.

pub mod autodiff;
pub mod decoupler;
pub mod detector;
pub mod experiment;
pub mod scalar;
pub mod synthgen;
pub mod tensorfile;
pub mod theory;
pub mod train;

pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type Detector = detector::Detector<f64>;
