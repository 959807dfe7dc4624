//! Gaussian-process geostatistics on large irregular point sets.
//!
//! Likelihoods use the Vecchia factorization over a max-min ordering; the
//! Kriging weights and conditional variances inside it come either from exact
//! Cholesky solves or from pre-trained feed-forward networks.

pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod kernel;
pub mod predict;
pub mod rng;
pub mod spatial;
pub mod surrogate;
pub mod vecchia;

pub use error::{Error, Result};
