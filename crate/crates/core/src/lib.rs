//! Gradient-space novelty detection boosted by a self-trained discriminator.

pub mod binary_classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod label_select;
pub mod linalg;
pub mod mahalanobis;
pub mod nn;
pub mod rng;
pub mod stream;

pub use error::{Error, Result};
