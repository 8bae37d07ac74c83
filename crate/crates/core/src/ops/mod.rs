//! Forward and backward kernels on plain tensors. The tape in
//! [`crate::autodiff`] records calls to these and replays the backward halves.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv_transpose2d};
pub use loss::{bce_with_logits, sigmoid, softmax_channels, softmax_cross_entropy, softplus};
pub use norm::{group_norm, DEFAULT_EPS as GROUP_NORM_EPS};
pub use pool::maxpool2x2;
