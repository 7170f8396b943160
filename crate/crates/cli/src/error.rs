use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] wearseg::Error),

    #[error("{at}: unknown key `{key}`")]
    UnknownKey { at: String, key: String },

    #[error("{at}: {msg}")]
    Syntax { at: String, msg: String },

    #[error("{}: {what} not found", path.display())]
    MissingPath { path: PathBuf, what: String },

    #[error("{0}")]
    Contradiction(String),

    #[error("{0}")]
    Usage(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category printed as `error[<category>]`.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::UnknownKey { .. } | CliError::Syntax { .. } | CliError::Contradiction(_) => "config",
            CliError::MissingPath { .. } => "missing-path",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } | CliError::Csv(_) => "io",
        }
    }
}
