use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("message value {0} is outside 0..=9")]
    InvalidMessage(u8),

    #[error("invalid mapping table: {0}")]
    InvalidMapping(String),

    #[error("no images available for tag {0}")]
    EmptyClassBucket(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("malformed CIFAR-10 record: {0}")]
    MalformedRecord(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("poisoning diverged at iteration {iteration}: non-finite loss")]
    Diverged { iteration: usize },

    #[error("mixing ratio must lie strictly between 0 and 1")]
    DegenerateAlpha,

    #[error("target accuracy {target:.4} is above the clean ceiling {ceiling:.4}")]
    Unreachable { target: f64, ceiling: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::InvalidConfig(e.to_string())
    }
}
