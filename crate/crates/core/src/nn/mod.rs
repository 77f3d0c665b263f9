//! A minimal differentiable-network core: tensor primitives with explicit
//! forward/backward passes, squeeze-and-excitation channel attention, and
//! three mini architecture families with two-class softmax heads.

pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod se;
pub mod tensor;

pub use model::{build_model, Family, Mode, Model, ModelSpec};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("model mode not set; call set_mode before forward")]
    ModeNotSet,
    #[error("backward called without a cached training forward")]
    NoForwardCache,
    #[error("batch normalization in train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("bad model spec: {0}")]
    BadSpec(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint i/o error on {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    CheckpointFormat { path: String, reason: String },
}

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Tensor,
    pub grad: Tensor,
    /// Whether decoupled weight decay applies (off for biases and
    /// normalization parameters).
    pub decay: bool,
}

impl Param {
    pub fn new(data: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(data.shape());
        Param { data, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}
