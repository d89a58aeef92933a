use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unsupported lag {lag} on edge {source_var} -> {target} (only lags 0 and 1 are supported)")]
    UnsupportedLag {
        source_var: String,
        target: String,
        lag: usize,
    },
    #[error("invalid SCM: {0}")]
    InvalidScm(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Csv(format!("{other:?}")),
            }
        } else {
            Error::Csv(e.to_string())
        }
    }
}
