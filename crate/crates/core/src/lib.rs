//! Significant-subspace alignment for test-time adaptation of tabular
//! regression models.
//!
//! The crate is organized bottom-up:
//! - [`linalg`]: dense matrices and a symmetric eigensolver
//! - [`netcore`]: the MLP regressor, forward modes, and reverse-mode gradients
//! - [`alignstat`]: feature statistics, subspace detection, alignment losses
//! - [`adapt`]: Adam, source training, the TTA loop, and baselines
//! - [`data`]: synthetic shift benchmarks and CSV ingestion
//! - [`report`]: metrics and experiment artifacts
//! - [`config`] / [`cli`]: the `ssa-tta` experiment driver

pub mod adapt;
pub mod alignstat;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod netcore;
pub mod report;

pub use error::{Error, Result};
