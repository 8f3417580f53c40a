//! Spherical-harmonic HRTF magnitude interpolation.
//!
//! The crate is organised bottom-up:
//!
//! - [`sh`]: real SH basis, least-squares SHT / ISHT.
//! - [`sphconv`]: zonal kernels and spectral spherical convolution.
//! - [`network`]: the interpolation model, LSD loss, hand-derived gradients.
//! - [`checkpoint`]: binary model checkpoints.
//! - [`optim`]: Adam and the training loop.
//! - [`data`]: grids, synthetic subjects, field files, dataset splits.
//! - [`eval`]: SH baseline, LSD reports, slice exports.
//! - [`config`] and [`cli`]: the `hrtf-sphconv` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod optim;
pub mod sh;
pub mod sphconv;

pub use error::{Error, Result};
