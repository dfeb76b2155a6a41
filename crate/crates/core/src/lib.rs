//! Homography estimation from cost volumes with a learned outlier-removal
//! stage trained by a dual-pair self-supervised loss.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: homographies, 4-point offsets, warping and MACE.
//! * [`datagen`]: synthetic warped pairs, dual pairs and the on-disk format.
//! * [`matching`]: the parameter-free cost volume.
//! * [`autograd`]: a small reverse-mode tape used by the trainable parts.
//! * [`network`]: extractor, denoiser, estimator and model variants.
//! * [`training`]: losses, the dual-pair training loop and gradient checks.
//! * [`evaluation`]: MACE evaluation, robustness sweeps, ablation tables, heatmaps.
//! * [`cli`]: the `homonet` command-line front end.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod matching;
pub mod network;
pub mod parallel;
pub mod real;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
