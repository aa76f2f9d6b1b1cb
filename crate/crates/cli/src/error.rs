use std::process::ExitCode;

use streamfetch_core::bundle::BundleError;
use streamfetch_core::grouping::GroupingError;
use streamfetch_core::sim::SimError;
use streamfetch_core::synth::SynthError;
use streamfetch_core::trace::TraceError;
use streamfetch_net::{FetchError, LiveError, RootError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("network: {0}")]
    Network(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Network(_) => 4,
        })
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Grouping(GroupingError::InvalidParams(m)) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RootError> for CliError {
    fn from(e: RootError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FetchError> for CliError {
    fn from(e: FetchError) -> Self {
        match e {
            FetchError::NotFound(_) => CliError::Data(e.to_string()),
            other => CliError::Network(other.to_string()),
        }
    }
}

impl From<LiveError> for CliError {
    fn from(e: LiveError) -> Self {
        match e {
            LiveError::Config(m) => CliError::Config(m),
            LiveError::Sim(s) => s.into(),
            LiveError::Fetch(f) => f.into(),
            LiveError::Cache(c) => CliError::Data(c.to_string()),
        }
    }
}
