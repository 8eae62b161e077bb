use std::path::PathBuf;

use thiserror::Error;

use crate::rollout::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient contribution at step {index}")]
    NonFiniteGradient { index: usize },

    /// A backend (remote model, annotator, task generator) failed. `raw` holds
    /// the last payload received, if any.
    #[error("backend error: {message}")]
    Backend {
        message: String,
        raw: Option<String>,
        retryable: bool,
    },

    #[error("horizon of {max_turns} turns exceeded")]
    Horizon { max_turns: usize },

    #[error("episode aborted after {} step(s): {source}", partial.steps.len())]
    Episode {
        partial: Box<Trajectory>,
        source: Box<Error>,
    },

    #[error("group aborted after {} completed episode(s): {source}", partial.len())]
    Group {
        partial: Vec<Trajectory>,
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn backend(message: impl Into<String>, raw: Option<String>) -> Self {
        Error::Backend {
            message: message.into(),
            raw,
            retryable: true,
        }
    }

    /// True for errors caused by bad user input (config, arguments, files)
    /// rather than by a runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::InvalidMdp(_)
                | Error::Dimension(_)
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}
