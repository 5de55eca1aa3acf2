//! Two-stream video anomaly detection with a Gaussian-mixture fully
//! convolutional variational autoencoder.
//!
//! Appearance patches (RGB) and motion patches (rank-pooled optical flow)
//! each train one model on normal data only. At test time every patch is
//! encoded, scored by its negative log mixture density, the two streams are
//! fused linearly and thresholded into anomaly masks.

pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gmvae;
pub mod imageio;
pub mod manifest;
pub mod patches;
pub mod pipeline;
pub mod par;
pub mod scoring;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
