//! Reverse-mode automatic differentiation over dense channel-last tensors.
//!
//! The layer set is deliberately small: dense, 2-D convolution, max pooling,
//! global average pooling, ReLU/sigmoid, batch normalization, dropout, and the
//! binary / softmax cross-entropy and L1 losses. Everything runs single-threaded
//! so a fixed seed reproduces results bit for bit.

mod error;
mod ops;
mod param;
mod scalar;
mod tape;
mod tensor;

#[cfg(any(test, feature = "oracles"))]
pub mod oracle;

pub use error::{Result, TensorError};
pub use ops::BCE_CLAMP;
pub use param::{Adam, AdamState, Parameter};
pub use scalar::Scalar;
pub use tape::{Activation, BatchNormStats, Conv2dSpec, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
