//! Experiment runner around `oclab-core`: configuration, worlds, pretraining,
//! stream runs, ablations, grid tuning, and artifact files.

pub mod config;
pub mod runner;

use oclab_core::autodiff::AdError;
use oclab_core::ctc::CtcError;
use oclab_core::data::DataError;
use oclab_core::metrics::MetricsError;
use oclab_core::model::ModelError;
use oclab_core::ocl::OclError;
use oclab_core::selftrain::SelfTrainError;
use oclab_core::stream::StreamError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit code. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<OclError> for CliError {
    fn from(e: OclError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<SelfTrainError> for CliError {
    fn from(e: SelfTrainError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<CtcError> for CliError {
    fn from(e: CtcError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<AdError> for CliError {
    fn from(e: AdError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
