//! Harness around the motion and image generators: run configuration,
//! checkpoints, metrics and the acceptance checks.

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod criteria;
pub mod metrics;
pub mod run;

use talkflow_core::Error;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) | Error::Training { .. } => 4,
    }
}
