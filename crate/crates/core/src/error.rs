use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix data has {len} entries, expected {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("matrix must have at least one row and one column, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("SVD did not converge on a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },

    #[error("invalid rank {rank}: must lie in 1..={max}")]
    InvalidRank { rank: usize, max: usize },

    #[error("relative error is undefined for a reference matrix with zero Frobenius norm")]
    ZeroReference,

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(&'static str),

    #[error("energy tolerance must lie in [0, 1), got {0}")]
    InvalidEpsilon(f64),

    #[error("a GQA group needs at least one query head")]
    EmptyGroup,

    #[error("invalid head grouping: {0}")]
    InvalidGroups(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unbalance factor must be positive and finite, got {0}")]
    InvalidBeta(f64),

    #[error("plan does not fit the attention slice: {0}")]
    PlanMismatch(String),

    #[error("methods disagree on ranks: {0}")]
    InconsistentRanks(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: String) -> Error {
    Error::DimensionMismatch { op, detail }
}
