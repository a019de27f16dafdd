//! Entry points behind the `fedharmony` binary.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks

pub mod commands;
pub mod config;
pub mod verify;

use std::fmt;

pub use config::{ExperimentConfig, Method, VerifySettings};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Divergence(String),
    /// Exit code 4.
    Verification(String),
    /// Exit code 1.
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Divergence(_) => 3,
            Self::Verification(_) => 4,
            Self::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Divergence(m) => write!(f, "training diverged: {m}"),
            Self::Verification(m) => write!(f, "verification failed: {m}"),
            Self::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fedharmony_core::Error> for CliError {
    fn from(e: fedharmony_core::Error) -> Self {
        match e {
            fedharmony_core::Error::Divergence { .. } => Self::Divergence(e.to_string()),
            other => Self::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Other(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Other(e.into())
    }
}
