//! Command-line front end: configuration, dispatch to the solvers, CSV output.

pub mod commands;
pub mod config;

pub use commands::{compute_cva, compute_value, figure1, run, split_overrides, CliError, Ctx, CvaEstimate, Estimate};
pub use config::{CloseoutChoice, ConfigError, Convention, Method, PayoffKind, RunConfig};
