//! Empirical variational Bayes decomposition of bidimensionally linked
//! matrices.
//!
//! A grid of data blocks `X_ij` (row sets `i`, column sets `j`) is split
//! into low-rank modules, each living on a chosen subset of row sets and
//! column sets. Modules are estimated by cycling a closed-form EVB
//! singular-value shrinkage over residual submatrices; missing entries are
//! filled in by an EM-style outer loop.

pub mod cli;
pub mod decompose;
pub mod error;
pub mod impute;
pub mod linalg;
pub mod linked;
pub mod shrinkage;
pub mod simbench;
mod sweep;

pub use error::{Error, Result};
