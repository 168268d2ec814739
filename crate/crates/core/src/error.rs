use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not match what an operation requires.
    #[error("shape mismatch in {op}: {dimension} is {actual}, expected {expected}")]
    Shape {
        op: &'static str,
        dimension: &'static str,
        actual: usize,
        expected: usize,
    },

    /// An operation received an argument outside its domain.
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// Geometry between two frames degenerated (no usable overlap).
    #[error("degenerate frame pair: {0}")]
    DegeneratePair(String),

    /// A dataset file or manifest failed to load or validate.
    #[error("data error: {0}")]
    Data(String),

    /// Configuration is missing or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint could not be read, written, or matched to the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training could not make progress.
    #[error("training error: {0}")]
    Train(String),

    /// Evaluation could not produce a result.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
