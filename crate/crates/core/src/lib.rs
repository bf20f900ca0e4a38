//! Low-rank projections for KV-cache compression.
//!
//! This crate computes the three families of rank-`R` key projections compared
//! throughout the project:
//!
//! * **K-SVD** truncates the SVD of the key cache alone,
//! * **Eigen** truncates the SVD of the stacked `[K; Q]` matrix,
//! * **KQ-SVD** factors the attention score matrix `K Qᵀ` directly, which is
//!   the optimal rank-`R` approximation of the scores in Frobenius norm.
//!
//! The value/output analogue, the grouped-query (GQA) variant, exact and
//! compressed multi-head attention forward passes, error metrics, and the
//! in-memory cache bundle model used by calibration live here as well.
//!
//! The crate is `no_std` and needs only `alloc`. File formats and the command
//! line live in the companion `kqsvd` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod cachestore;
pub mod compress;
mod error;
pub mod linalg;
pub mod random;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdFactors};
