//! Minimal dense-tensor core with reverse-mode automatic differentiation.
//!
//! Values are `f64`. A [`Tape`] records operations on [`Var`] handles and
//! [`Tape::backward`] returns adjoints for every leaf that asked for one.
//! Learnable tensors live in named [`ParameterSet`]s which bind into a tape
//! without copying and are updated by [`Adam`].

mod adam;
mod broadcast;
pub mod checkpoint;
mod conv;
mod gemm;
pub mod gradcheck;
pub mod ops;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::{Checkpoint, Dtype};
pub use params::{Bound, ParameterSet};
pub use rng::{derive_seed, seeded, SeededRng};
pub use tape::{log_sum_exp, sample_index, sigmoid, softmax_in_place, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floor applied inside every log and division guard.
pub const EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
