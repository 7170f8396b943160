//! Filter-scaled U-Net with adjustable dropout.
//!
//! Encoder steps apply two same-padded 3x3 convolutions with ReLU, dropout
//! and 2x2 max pooling; the bottleneck repeats the double convolution at the
//! widest level; decoder steps upsample with a 2x2 stride-2 transposed
//! convolution, concatenate the matching encoder features and apply two more
//! 3x3 convolutions and dropout. A 1x1 convolution and a channel softmax
//! produce per-pixel class probabilities.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{Checkpoint, ManifestEntry, TrainingMeta, FORMAT_VERSION, MAGIC};
pub use config::{UNetConfig, DEFAULT_BASE_DROPOUT};
pub use model::{argmax_channels, layer_manifest, param_count, ParamSpec, TapeForward, UNet};
