use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error at row {row}, column {col}: {msg}")]
    Data { row: usize, col: usize, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn dimension(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
