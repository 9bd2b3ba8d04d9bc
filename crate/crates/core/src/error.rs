use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid difference: {0}")]
    InvalidDifference(String),

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("thickness must be ≥ 1")]
    ZeroThickness,

    #[error("quality out of range: {0} (expected 1..=100)")]
    QualityOutOfRange(u8),

    #[error("image buffer length {got} does not match {width}x{height}x3")]
    BufferSize { width: u32, height: u32, got: usize },

    #[error("image codec error: {0}")]
    Codec(String),

    #[error("case {0} has no ground truth")]
    MissingGroundTruth(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("image {0} has no embedding")]
    MissingEmbedding(String),

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid proportions: {0}")]
    InvalidProportions(String),

    #[error("probability out of range: {0}")]
    InvalidProbability(f64),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("mismatched case sets: {0}")]
    MismatchedCases(String),

    #[error("embedding failed: {0}")]
    Embedding(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
