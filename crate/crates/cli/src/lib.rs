//! Command implementations behind the `resformer` binary.

// NaN-rejecting guards are written as `!(x <= tol)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, Profile, RunConfig};
pub use error::{CliError, CliResult};

/// Environment variable capping within-batch parallelism.
pub const THREADS_ENV: &str = "RESFORMER_THREADS";
