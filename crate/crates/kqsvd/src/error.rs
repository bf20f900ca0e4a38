//! Command failures and their exit codes.

use std::fmt;

use crate::bundle::BundleError;
use crate::format::FormatError;

/// Exit code classes: 1 usage, 2 validation or invariant failure, 3 I/O.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<kqsvd_core::Error> for CliError {
    fn from(e: kqsvd_core::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let msg = e.to_string();
        match e {
            FormatError::DimensionMismatch { .. }
            | FormatError::DtypeMismatch { .. }
            | FormatError::Invalid { .. } => CliError::Validation(msg),
            FormatError::Missing { .. }
            | FormatError::BadMagic { .. }
            | FormatError::Truncated { .. }
            | FormatError::TrailingBytes { .. }
            | FormatError::UnknownDtype { .. }
            | FormatError::Io { .. } => CliError::Io(msg),
        }
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Format(f) => f.into(),
            BundleError::Manifest { .. } | BundleError::Invalid { .. } => {
                CliError::Validation(e.to_string())
            }
            BundleError::NotABundle { .. } | BundleError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}
