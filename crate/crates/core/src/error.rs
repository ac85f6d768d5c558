use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum QrrError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mode {mode} out of range for tensor of order {order}")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in input")]
    NonFinite,

    #[error("svd did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("ledger desynchronized: {0}")]
    Desync(String),

    #[error("malformed message: {0}")]
    Malformed(String),

    #[error("unsupported wire version {0}")]
    VersionMismatch(u8),

    #[error("malformed IDX data: {0}")]
    Idx(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QrrError {
    fn from(e: std::io::Error) -> Self {
        QrrError::Io(e.to_string())
    }
}

impl From<csv::Error> for QrrError {
    fn from(e: csv::Error) -> Self {
        QrrError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QrrError>;
