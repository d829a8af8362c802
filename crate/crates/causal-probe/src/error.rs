//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide error enum. Variants map onto the CLI exit codes:
/// config errors exit 2, contract/shape/range violations exit 3,
/// I/O and file-format errors exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A stated precondition does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (level, node, class, ...) is out of range.
    #[error("out of range: {0}")]
    Range(String),

    /// A binary file does not match its expected format.
    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    /// Configuration could not be parsed or is incomplete.
    #[error("config error: {0}")]
    Config(String),

    /// An I/O operation failed; the path is named for actionability.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
