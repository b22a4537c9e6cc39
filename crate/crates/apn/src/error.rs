use std::path::PathBuf;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit-code convention: [`Error::Dimension`],
/// [`Error::Contract`] and [`Error::Format`] are validation failures (exit 1),
/// [`Error::Io`] is an I/O failure (exit 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file exists but its contents are not what the schema requires.
    #[error("invalid {what} in {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(what: &'static str, path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Format {
            what,
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 for validation, 2 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Contract(_) | Error::Format { .. } => 1,
            Error::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
