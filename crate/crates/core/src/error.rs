use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes: configuration
/// problems (2), data/model mismatches (3), and numeric failures (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    #[error("{0}")]
    Domain(String),

    #[error("loss must be a scalar on the tape")]
    LossNotScalar,

    #[error("tensor is not on the tape")]
    NotOnTape,

    #[error("config error: {0}")]
    Config(String),

    #[error("data/model mismatch: {0}")]
    Mismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
