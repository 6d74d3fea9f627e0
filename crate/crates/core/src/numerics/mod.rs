//! Minimal differentiable tensor machinery for the encoder and loss.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, nudge_off_kinks, GradCheckReport};
pub use graph::{conv_output_len, smooth_l1_value, Gradients, Graph, Var, NORM_EPS};
pub use params::ParamStore;
pub use scalar::{gemm, Scalar, View};
pub use tensor::{Tensor, MAX_RANK};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input length {got} shorter than required {needed}")]
    Length { needed: usize, got: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
