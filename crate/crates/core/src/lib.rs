//! Differentially private SGD with a spectrally tempered memory branch built
//! only from previously privatized releases.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: counter-keyed random streams, dense matrices and a cyclic
//!   Jacobi eigensolver.
//! - [`data`]: IDX ingestion, a synthetic Gaussian-blob generator and Poisson
//!   subsampling.
//! - [`model`]: logistic regression and a one-hidden-layer MLP with exact
//!   per-example gradients, one parameter group per layer.
//! - [`spectral`]: power-law tail exponent of `WᵀW`, interval deviation and
//!   the tempering coefficient.
//! - [`memory`]: release history, fractional kernel, EMA trend, gate, scale
//!   and warm-up.
//! - [`optimizer`]: the private step itself and the adjacency probe.
//! - [`accountant`]: Rényi-DP accounting with joint and marginal ledgers.
//! - [`run`]: configuration, training runs, sweeps and CSV reporting.

pub mod accountant;
pub mod data;
pub mod error;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod optimizer;
pub mod run;
pub mod spectral;

pub use error::{Error, Result};
