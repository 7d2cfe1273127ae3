//! Command-line pipeline and scanning service for learned input filters.
//!
//! Every subcommand is a thin wrapper over a function in [`pipeline`] or
//! [`service`], so the same code paths can be driven from tests.

pub mod config;
pub mod pipeline;
pub mod service;

use std::io;

use thiserror::Error;
use vpatch_core::dataset::DatasetError;
use vpatch_core::fuzzer::FuzzError;
use vpatch_core::metrics::MetricsError;
use vpatch_core::neuralnet::NetError;
use vpatch_core::target::TargetError;

pub use config::Settings;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const BLOCK: i32 = 2;
    pub const USAGE: i32 = 3;
    pub const DATA: i32 = 4;
    pub const TARGET: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("target: {0}")]
    Target(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Data(_) => exit::DATA,
            CliError::Target(_) => exit::TARGET,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TargetError> for CliError {
    fn from(e: TargetError) -> Self {
        match e {
            TargetError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Target(e.to_string()),
        }
    }
}

impl From<FuzzError> for CliError {
    fn from(e: FuzzError) -> Self {
        match e {
            FuzzError::Target(t) => t.into(),
            FuzzError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Target(t) => t.into(),
            MetricsError::Fuzz(f) => f.into(),
            MetricsError::Dataset(d) => d.into(),
            MetricsError::Net(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
