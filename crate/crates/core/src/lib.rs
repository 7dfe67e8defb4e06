//! Identification of 2D image slices against an ordered reference atlas.
//!
//! Slices and atlas plates are mapped into a shared embedding space by a small
//! convolutional network trained with contrastive or triplet losses; plates are
//! ranked for a query by Euclidean distance. A mutual-information affine
//! registration stack provides both the exhaustive baseline identifier and the
//! training signal for a CNN that regresses affine parameters directly.
//!
//! Module map:
//!
//! - [`imagekit`]: grayscale images, PGM I/O, CLAHE, resizing, affine warps.
//! - [`synthatlas`]: deterministic synthetic atlas and slice generator.
//! - [`tensornet`]: the fixed CNN family, backprop, Adam, checkpoints.
//! - [`metric`]: contrastive/triplet losses and online triplet mining.
//! - [`identify`]: embedding index, ranking, evaluation and training.
//! - [`register`]: mutual information, pyramid registration, baseline, regressor.

pub mod error;
pub mod identify;
pub mod imagekit;
pub mod metric;
pub mod register;
pub mod rng;
pub mod synthatlas;
pub mod tensornet;

pub use error::{Error, Result};
pub use imagekit::{AffineTransform, ClaheConfig, GrayImage};
