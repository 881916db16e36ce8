use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: String, actual: String },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("empty replay buffer")]
    EmptyReplay,
    #[error("empty action sequence")]
    EmptyActions,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("planner produced no finite candidate scores")]
    DegenerateElites,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Configuration problems map to exit code 2 in the CLI; everything else to 1.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownRegion(_) | Error::UnknownTask(_)
        )
    }
}
