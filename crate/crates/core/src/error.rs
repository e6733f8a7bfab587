use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SddeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SddeError {
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A coefficient or state left the representable range.
    #[error("numeric range error in {context} at x={x:?}, y={y:?}")]
    NumericRange {
        context: &'static str,
        x: Vec<f64>,
        y: Vec<f64>,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SddeError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        SddeError::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SddeError::Io {
            path: path.into(),
            source,
        }
    }
}
