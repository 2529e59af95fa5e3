//! Error taxonomy of the command-line driver. Every failure carries a
//! machine-readable category that maps one-to-one onto the process exit
//! code, so scripts can branch on either.

use std::path::PathBuf;
use thiserror::Error;
use uadbench_core::data::DataError;
use uadbench_core::postproc::PostprocError;
use uadbench_core::scoring::ScoreError;
use uadbench_core::MetricsError;
use uadbench_core::ZooError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Train(#[from] ZooError),

    #[error(transparent)]
    Score(#[from] ScoreError),

    #[error(transparent)]
    Postproc(#[from] PostprocError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error("no completed result cells under {0}")]
    EmptyResults(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// A worker process failed; its own stderr already explained why.
    #[error("worker for cell {cell} exited with code {code}")]
    Worker { cell: String, code: i32 },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> CliError {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Train(_) => "training",
            CliError::Score(_) | CliError::Postproc(_) | CliError::Metrics(_) => "scoring",
            CliError::EmptyResults(_) => "empty-results",
            CliError::Io { .. } => "io",
            CliError::Worker { .. } => "worker",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Train(_) => 4,
            CliError::Score(_) | CliError::Postproc(_) | CliError::Metrics(_) => 5,
            CliError::EmptyResults(_) => 6,
            CliError::Io { .. } => 7,
            // Propagate the child's code so the category survives the hop.
            CliError::Worker { code, .. } => *code,
        }
    }
}
