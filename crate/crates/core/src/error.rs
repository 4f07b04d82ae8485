use thiserror::Error;

/// Errors raised by the neuro-fuzzy library.
#[derive(Debug, Error)]
pub enum NfnError {
    /// Shapes or indices that do not line up with the network layout.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite or otherwise unusable input data.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid hyperparameter or configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// An API used out of order (e.g. a stale tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training diverged or produced a non-finite gradient.
    #[error("training error at `{path}`: {message}")]
    Training { path: String, message: String },

    /// An environment broke its step contract.
    #[error("environment error: {0}")]
    Environment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = NfnError> = std::result::Result<T, E>;

pub(crate) fn structural(msg: impl Into<String>) -> NfnError {
    NfnError::Structural(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> NfnError {
    NfnError::Config(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> NfnError {
    NfnError::Input(msg.into())
}
