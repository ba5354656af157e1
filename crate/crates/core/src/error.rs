use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {field}: {message}")]
    Format {
        path: PathBuf,
        field: &'static str,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error [{section}] {key}: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },

    #[error("pipeline-order error: missing {artifact}")]
    PipelineOrder { artifact: String },

    #[error("no markers: foreground is non-empty but no seed peaks were supplied")]
    NoMarkers,

    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: &'static str,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field,
            message: message.into(),
        }
    }

    pub(crate) fn config(
        section: impl Into<String>,
        key: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Config {
            section: section.into(),
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn missing(artifact: impl Into<String>) -> Self {
        Error::PipelineOrder {
            artifact: artifact.into(),
        }
    }
}

/// Shorthand for shape checks shared by the numerical modules.
pub(crate) fn ensure_same_dims(what: &str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!(
            "{what}: shape mismatch {a:?} vs {b:?}"
        )));
    }
    Ok(())
}
