use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error from {url} after {attempts} attempt(s): {message}")]
    Transport {
        url: String,
        attempts: usize,
        message: String,
    },

    #[error("HTTP {status} from {url} after {attempts} attempt(s): {body}")]
    Status {
        url: String,
        status: u16,
        attempts: usize,
        body: String,
    },

    #[error("malformed response: {0}")]
    Decode(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("request carries {got} images, endpoint accepts at most {max}")]
    TooManyImages { got: usize, max: usize },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("embedding dimension changed within a run: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cache {}: {source}", path.display())]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] editdiff_core::Error),
}

impl GatewayError {
    /// Whether a failure may succeed on retry.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}
