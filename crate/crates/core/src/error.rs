use std::path::PathBuf;

use crate::numerics::NumericsError;
use crate::selfies::SelfiesError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Selfies(#[from] SelfiesError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("condition mismatch: {0}")]
    ConditionMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: line {line}: {message}")]
    Data { path: String, line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by non-finite numbers.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::Numerics(NumericsError::NonFinite(_))
                | Error::Numerics(NumericsError::NonFiniteGradient(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
