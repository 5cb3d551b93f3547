use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid hyperparameters or window/receptive-field violations.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data. `row` is 1-based and counts the header.
    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss or parameters during optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
