use std::path::PathBuf;

/// Errors of the file formats, drivers and command-line tool.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] modsynth_core::Error),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}:{line}: {message}", .path.display())]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the error comes from bad input rather than a runtime failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Core(e) => !matches!(e, modsynth_core::Error::NumericDomain { .. }),
            Error::Io { .. } => false,
            Error::Format { .. } | Error::Config { .. } => true,
        }
    }
}
