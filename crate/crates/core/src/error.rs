use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParam { key: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("step called on a terminal state (step {step} of horizon {horizon})")]
    TerminalState { step: usize, horizon: usize },

    #[error("gradient tape is stale: {0}")]
    StaleTape(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("no unique equilibrium: {0}")]
    Singular(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    /// Training produced a non-finite loss. `diagnostics` is a JSON dump of
    /// the offending batch and parameter statistics.
    #[error("non-finite loss at episode {episode}, step {step}")]
    NonFinite {
        episode: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
