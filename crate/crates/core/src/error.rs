use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside the accepted domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The CSV header does not follow the dataset column convention.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    /// Two spectra (or a spectrum and a model) disagree on the wavelength grid.
    #[error("grid mismatch: expected {expected} wavelengths, found {found}")]
    GridMismatch { expected: usize, found: usize },

    /// Serialized model is unreadable, corrupted, or of another version.
    #[error("format error: {0}")]
    Format(String),

    /// A required component of a model bundle is missing.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
