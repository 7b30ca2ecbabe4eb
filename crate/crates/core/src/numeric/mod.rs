//! Minimal dense tensors, reverse-mode differentiation and Adam, all in `f64`.

mod adam;
mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, WeightDecayMode};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::bce_with_logit;

#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Config(String),
}
