use std::time::Duration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }
}

/// Failures talking to an external bridge peer. Every variant carries the
/// request id it belongs to when one was assigned.
#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("bridge request {id} timed out after {after:?}")]
    Timeout { id: u64, after: Duration },
    #[error("bridge protocol error (request {id:?}) in field `{field}`: {message}")]
    Protocol {
        id: Option<u64>,
        field: String,
        message: String,
    },
    #[error("bridge connection error (request {id:?}): {message}")]
    Connection { id: Option<u64>, message: String },
    #[error("bridge peer rejected request {id}: {message}")]
    Remote { id: u64, message: String },
}

impl BridgeError {
    pub fn request_id(&self) -> Option<u64> {
        match self {
            BridgeError::Timeout { id, .. } | BridgeError::Remote { id, .. } => Some(*id),
            BridgeError::Protocol { id, .. } | BridgeError::Connection { id, .. } => *id,
        }
    }
}
