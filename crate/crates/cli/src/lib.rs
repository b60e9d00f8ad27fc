//! Config-driven commands around the `mpdr` library.
//!
//! Every command reads an experiment config, works inside one output
//! directory and prints `key=value` records to stdout. Failures are reported
//! on stderr as `error code=<CODE> message="..."` with a nonzero exit status.

// Negated comparisons such as `!(x > 0.0)` are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod record;

use std::fmt;

/// A failure with a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("E_CONFIG", message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error code={} message={:?}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<mpdr::Error> for CliError {
    fn from(e: mpdr::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}
