use std::fmt::Display;

use thiserror::Error;

/// Failures of a CLI command, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("check failed: {0}")]
    Check(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Divergence(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn config(e: impl Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn io(context: impl Display, e: impl Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }

    /// 0 ok, 1 check failure, 2 configuration, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) | CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) | CliError::Checkpoint(_) => 4,
        }
    }
}

impl From<metanorm::Error> for CliError {
    /// Errors raised while building from a configuration count as
    /// configuration errors; data files that cannot be read as I/O.
    fn from(e: metanorm::Error) -> Self {
        use metanorm::Error as E;
        match e {
            E::Divergence { .. } => CliError::Divergence(e.to_string()),
            E::Io(_) | E::Format(_) => CliError::Io(e.to_string()),
            E::Shape(_) | E::Broadcast { .. } | E::Partition(_) | E::InvalidArgument(_) => {
                CliError::Config(e.to_string())
            }
            E::Numeric(_) | E::Autodiff(_) | E::UninitializedRunningStats => CliError::Run(e.to_string()),
        }
    }
}
