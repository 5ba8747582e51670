use thiserror::Error;

/// Errors produced by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model construction failed: {0}")]
    ModelBuild(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("failed to load {file}: {reason}")]
    DataLoad { file: String, reason: String },

    #[error("partition failed after {attempts} attempts: {reason}")]
    Partition { attempts: usize, reason: String },

    #[error("clustering error: {0}")]
    Clustering(String),

    #[error("federation error (round {round}): {reason}")]
    Federation { round: usize, reason: String },

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
