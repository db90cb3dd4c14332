//! Densely connected residual segmentation networks on a small
//! tape-based autodiff core, plus the training protocol and the
//! inspection tools (stage-dropping, weight-norm profiling,
//! norm-thresholded compression) used to analyze trained models.

pub mod analysis;
pub mod blocks;
pub mod builder;
pub mod data;
pub mod error;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tape, Tensor};
