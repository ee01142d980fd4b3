//! Loss functions for class-imbalanced segmentation.
//!
//! The crate covers the cross-entropy / Dice family of losses up to the
//! Unified Focal loss, each with an exact analytic gradient with respect to
//! the logits, plus the machinery needed to trust and exercise them:
//!
//! - [`numerics`]: dense tensors, softmax, one-hot encoding and the SEGT file format.
//! - [`losses`]: forward values and gradients for every loss family.
//! - [`oracle`]: finite-difference gradients and a naive scalar re-implementation.
//! - [`metrics`]: hard-label DSC / IoU / precision / recall and the Wilcoxon rank-sum test.
//! - [`synth`]: synthetic imbalanced scenes.
//! - [`trainer`]: a tiny fully-convolutional net with hand-written backprop.
//! - [`bench`]: loss × scene × seed grids with CI tables and significance tests.

pub mod bench;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{evaluate, gradient, LossOutput, LossSpec};
pub use numerics::{OneHotMask, ProbTensor, Tensor};

/// Version string of this build, recorded in run provenance files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
