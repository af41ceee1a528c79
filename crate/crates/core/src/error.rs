use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward root must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("tensor belongs to a tape generation that has been reset")]
    StaleTensor,

    #[error("{what} out of range: {value} (valid {valid})")]
    OutOfRange {
        what: &'static str,
        value: i64,
        valid: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {format} file: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }
}
