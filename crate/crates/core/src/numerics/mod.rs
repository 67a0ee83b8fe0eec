//! Deterministic numeric substrate shared by every other module.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{sym_eigen, sym_eigvals, SymEigen};
pub use matrix::{dot, norm2, DenseMatrix};
pub use rng::{bernoulli_mask, gaussian_vector, uniform_vector, Purpose, RandomStream, StreamRng};
