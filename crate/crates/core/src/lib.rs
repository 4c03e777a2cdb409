//! IncepFormer semantic segmentation on a small reverse-mode autodiff engine.
//!
//! - [`tensor`] and [`ops`]: dense tensors and forward/backward kernels.
//! - [`autograd`]: the tape that makes those kernels differentiable.
//! - [`model`]: configuration, parameters and the encoder/decoder forward pass.
//! - [`analysis`]: parameter and FLOP accounting.
//! - [`train`]: synthetic data, optimizer, metrics, checkpoints.

pub mod analysis;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autograd::{BatchStats, Gradients, OpCost, Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use tensor::{DType, Scalar, Tensor};
