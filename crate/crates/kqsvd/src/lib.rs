//! File formats, experiment drivers and the `kqsvd` command line on top of
//! [`kqsvd_core`].

pub mod bundle;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod format;
pub mod plans;

pub use bundle::{read_bundle, write_bundle, BundleError};
pub use error::CliError;
pub use format::FormatError;
pub use plans::{read_plans, write_plans, PlanSet, RankSpec};
