use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// Each variant maps onto a stable, machine-parsable category (see
/// [`Error::category`]) that the command-line front end prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid shapes, extents or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a contract (unknown mask colour, bad label, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity appeared in a forward or backward pass.
    #[error("numeric error: {0}")]
    NonFinite(String),

    /// A requested value lies outside the attainable range.
    #[error("range error: {0}")]
    Range(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Corrupt or inconsistent checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A checkpoint does not match the requested model configuration.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Numerical linear algebra failure (e.g. Cholesky after jitter escalation).
    #[error("linear algebra error: {0}")]
    LinAlg(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short lowercase category used in one-line error reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::NonFinite(_) => "numeric",
            Error::Range(_) => "range",
            Error::Version { .. } => "version",
            Error::Checkpoint(_) => "checkpoint",
            Error::Incompatible(_) => "incompatible",
            Error::LinAlg(_) => "linalg",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Csv(_) => "io",
        }
    }
}
