use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a spec) disagree along an axis.
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// A configuration value is unusable (output size < 1, indivisible input, ...).
    #[error("{0}")]
    Spec(String),

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    /// Numeric failure tied to a named parameter (non-finite gradient or estimate).
    #[error("numeric failure in `{param}`: {reason}")]
    Numeric { param: String, reason: String },

    #[error("training diverged at epoch {epoch} (last good checkpoint: {last_good:?})")]
    Diverged {
        epoch: usize,
        last_good: Option<PathBuf>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Malformed binary or text input. `offset` is the byte offset where decoding stopped.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numeric pipeline rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numeric { .. } | Error::Diverged { .. }
        )
    }
}
