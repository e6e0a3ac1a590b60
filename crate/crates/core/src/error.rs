use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("structural error at layer {layer}: {msg}")]
    Structural { layer: usize, msg: String },

    #[error("stale cache: network version {network} but cache was built at version {cache}")]
    StaleCache { network: u64, cache: u64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn structural(layer: usize, msg: impl Into<String>) -> Self {
        Error::Structural {
            layer,
            msg: msg.into(),
        }
    }
}
