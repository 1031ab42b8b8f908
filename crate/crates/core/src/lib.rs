//! Sparse beamspace channel reconstruction with trimmed-ridge regression.
//!
//! The crate covers the whole pipeline:
//!
//! - [`channel`]: Saleh-Valenzuela channels on a half-wavelength ULA and
//!   their DFT beamspace form.
//! - [`sensing`]: Bernoulli measurement matrices, noisy observations and
//!   supervised datasets.
//! - [`solvers`]: the trimmed-ridge objective in the lifted nonnegative
//!   space, its fixed-step and Barzilai-Borwein solvers, and the ridge,
//!   Lasso and OMP baselines.
//! - [`utrr`]: the unfolded network, its reverse pass, training loop and
//!   averaging ensemble.
//! - [`metrics`]: NMSE, accurate-reconstruction ratio, zero-forcing
//!   precoding and downlink sum rate.
//! - [`config`], [`formats`], [`workbench`]: experiment configuration,
//!   binary file formats and the orchestration behind the `trr` CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod rng;
mod select;
pub mod sensing;
pub mod solvers;
pub mod utrr;
pub mod workbench;

pub use config::{ExperimentConfig, SolverKind};
pub use error::{Error, Result};
