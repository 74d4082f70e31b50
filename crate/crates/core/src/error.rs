use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("registry error: unknown layer id {0}")]
    UnknownLayer(usize),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// A tape invariant was broken (e.g. a saved activation went missing).
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("non-finite loss {loss} at iteration {iteration} (frozen layers: {frozen:?})")]
    NonFiniteLoss {
        iteration: usize,
        loss: f64,
        frozen: Vec<usize>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
