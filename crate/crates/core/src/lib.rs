//! Unpaired, uni-directional image-to-image transfer with built-in
//! aleatoric uncertainty estimation.
//!
//! The model is a Wasserstein-critic GAN whose generator is constrained by
//! patch invariance: a random patch of the input, propagated through the
//! generator, must match the corresponding patch of the transferred
//! full-size image. The patch residuals are modelled by an input-dependent
//! Laplace scale map, which gives the generator a second output head that
//! predicts per-pixel uncertainty.
//!
//! The crate contains the complete pipeline: data ingestion and a synthetic
//! desk-scale dataset, the patch operator, both generator losses (plain and
//! uncertainty-attenuated), the alternating training loop, and the
//! SSIM/PSNR/robustness/uncertainty evaluation harness.

pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod patch_ops;
pub mod testing;
pub mod training;

pub use error::{Error, Result};
