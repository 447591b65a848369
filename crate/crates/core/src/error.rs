use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected dimension {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown label {0}")]
    Label(u32),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("invalid domain spec: {0}")]
    Spec(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("insufficient instances: {0}")]
    Budget(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("cold start: {0}")]
    ColdStart(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
