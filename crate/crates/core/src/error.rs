use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("finite-difference oracle invalid: {0}")]
    OracleInvalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing upstream stage(s) `{stage}`: {detail}")]
    Dependency { stage: String, detail: String },
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
