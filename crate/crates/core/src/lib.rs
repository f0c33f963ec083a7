//! Shared data model for the IMD matching pipeline.
//!
//! Everything downstream (backbone, matcher, refiner, supervision, evaluation)
//! speaks in terms of the types defined here:
//!
//! - [`Image`] – 8-bit RGB image, preprocessed so both dims are divisible by 8.
//! - [`FeatureMap`] – channel-major float grid with an integer stride.
//! - [`CoarseMatchSet`] / [`FineMatchSet`] – cell-level and subpixel matches.
//! - [`CameraFrame`] / [`InstanceMaskPair`] – ground truth for pose and IMIM evaluation.
//! - [`MatchingConfig`] – hyperparameters shared by inference and training.
//!
//! Pixel coordinates use the pixel-center convention: pixel `(col, row)` covers
//! `[col - 0.5, col + 0.5] x [row - 0.5, row + 0.5]`, so a cell of stride `s`
//! is centered at `((col + 0.5) * s - 0.5, (row + 0.5) * s - 0.5)`.

pub mod config;
pub mod error;
pub mod feature;
pub mod geometry;
pub mod image;
pub mod mask;
pub mod matches;
pub mod tensor_io;

pub use config::MatchingConfig;
pub use error::{CoreError, Result};
pub use feature::FeatureMap;
pub use geometry::{cell_center, CameraFrame, DepthMap};
pub use image::Image;
pub use mask::{InstanceMaskPair, Mask};
pub use matches::{CoarseMatch, CoarseMatchSet, FineMatch, FineMatchSet};
pub use tensor_io::{DType, NdTensor, TensorData, TensorSidecar};

/// Stride of the coarse (1/8) feature level in image pixels.
pub const COARSE_STRIDE: usize = 8;
/// Stride of the fine (1/2) feature level in image pixels.
pub const FINE_STRIDE: usize = 2;
