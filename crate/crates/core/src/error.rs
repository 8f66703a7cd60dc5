use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{block} update failed at iteration {iteration}: {source}")]
    Sweep {
        iteration: usize,
        block: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (factorizations, non-finite states)
    /// as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Factorization(_) | Error::Numerical(_) => true,
            Error::Sweep { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn in_block(self, iteration: usize, block: &'static str) -> Self {
        Error::Sweep {
            iteration,
            block,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
