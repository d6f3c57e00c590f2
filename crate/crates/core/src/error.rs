//! Crate-wide error type.

/// Errors produced by tensor operations, model I/O, training and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operands have incompatible shapes.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An argument violates an operation's preconditions.
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A forward operation produced a NaN or infinity from finite inputs.
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },

    /// The backward graph is malformed (non-scalar loss, detached loss, ...).
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// Checkpoint serialization or validation failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Image decoding, encoding or format failure.
    #[error("image: {0}")]
    Image(String),

    /// Training aborted (non-finite loss, bad dataset, ...).
    #[error("training: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
