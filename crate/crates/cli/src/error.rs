use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// A verified property does not hold.
    #[error("property failure: {0}")]
    Property(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or mismatched input (weights, image, manifest, labels).
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] colln_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 property failure, 2 configuration, 3 I/O or
    /// input format.
    pub fn exit_code(&self) -> u8 {
        use colln_core::Error as E;
        match self {
            CliError::Property(_) | CliError::Core(E::Internal(_)) => 1,
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Format(_)
            | CliError::Io { .. }
            | CliError::Core(E::WeightFormat(_) | E::Image(_) | E::Io { .. }) => 3,
        }
    }
}
