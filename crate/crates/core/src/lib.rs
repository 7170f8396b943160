//! Semantic segmentation of blanking-tool wear from in-process camera images.
//!
//! The crate contains everything needed to go from raw grayscale frames to
//! per-class wear statistics:
//!
//! * [`numerics`]: a small tensor library with reverse-mode autodiff,
//! * [`unet`]: the filter-scaled U-Net, its parameter count and checkpoints,
//! * [`dataio`]: image and colour-mask files, class palettes, dataset splits,
//! * [`synth`]: a procedural punch-surface generator with exact labels,
//! * [`augment`]: mask-consistent photometric and flip augmentation,
//! * [`metrics`]: IoU, confusion matrices and pixel-count series,
//! * [`training`]: the training loop, grid search and Bayesian weight search,
//! * [`acquisition`]: press kinematics and exposure motion blur.
//!
//! The companion guide in `book/` walks through each piece; its code
//! listings are compiled as doc-tests of this crate.

pub mod acquisition;
pub mod augment;
pub mod error;
pub mod dataio;
pub mod metrics;
pub mod numerics;
pub mod synth;
pub mod training;
pub mod unet;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Chapters of the guide in `book/`, compiled so their listings run as
/// doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/unet.md")]
    mod unet {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/augment.md")]
    mod augment {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/acquisition.md")]
    mod acquisition {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
