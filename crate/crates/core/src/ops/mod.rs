//! Forward and backward kernels on plain [`Tensor`](crate::Tensor)s.
//!
//! These functions know nothing about the tape; [`crate::autograd`] wraps
//! them into differentiable operations.

mod activation;
mod conv;
pub(crate) mod gemm;
mod layout;
mod loss;
mod matmul;
mod norm;
mod pool;
mod softmax;
mod sum;
mod upsample;

pub use activation::{unary_backward, unary_map, Unary};
pub(crate) use conv::ConvGeometry;
pub use conv::{conv2d, conv2d_backward, Conv2dOptions, ConvGrads};
pub(crate) use layout::inverse_permutation;
pub use layout::{concat, img2seq, permute, reshape_seq_img, seq2img, split, SeqImg};
pub use loss::cross_entropy;
pub use matmul::{matmul_backward, matmul_batched};
pub use norm::{batch_norm2d, layer_norm, update_running_stats, BatchNormForward, NormMode};
pub(crate) use norm::{batch_norm2d_backward, batch_norm2d_forward, layer_norm_backward, layer_norm_forward};
pub use pool::{avg_pool2d, avg_pool2d_backward};
pub use softmax::{softmax, softmax_backward};
pub(crate) use sum::compensated_sum;
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};
