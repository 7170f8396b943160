//! Deterministic tensors, layer kernels and reverse-mode differentiation.
//!
//! The layer set is exactly what the U-Net needs: same-padded and pointwise
//! convolutions, 2x2 max pooling, 2x2 stride-2 transposed convolutions,
//! ReLU, inverted dropout, channel concatenation, channel softmax and a
//! normalised pixel-weighted cross-entropy.

pub mod kernels;
pub mod optim;
mod scalar;
pub mod tape;
mod tensor;

pub use kernels::ConvSpec;
pub use optim::{make_optimizer, Adam, Optimizer, OptimizerKind, Sgd};
pub use scalar::Real;
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
