use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },

    #[error("tensor shape {shape:?} does not hold {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("node {0} is not a scalar")]
    NotScalar(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("no valid ground-truth pixels")]
    NoValidPixels,

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("universal training hit a non-finite loss at minibatch {minibatch}")]
    UniversalDiverged { minibatch: usize },

    #[error("malformed data at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::UniversalDiverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
