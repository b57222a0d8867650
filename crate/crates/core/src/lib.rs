//! Simulated bend-resistant multimode-fiber imaging.
//!
//! The crate synthesizes configuration-dependent speckle measurements,
//! trains a Gaussian-mixture VAE that classifies and reconstructs objects
//! from them, trains autoencoder baselines, and evaluates both.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
mod binio;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fiber;
pub mod gmvae;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
