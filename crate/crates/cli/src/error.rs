use std::path::PathBuf;

use ctran_core::intervene::RequestError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ctran_core::Error),

    #[error(transparent)]
    Request(#[from] RequestError),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("server: {0}")]
    Server(std::io::Error),
}

impl CliError {
    /// 2 for usage errors and missing input paths, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(ctran_core::Error::Io { source, .. })
            | CliError::Request(RequestError::Model(ctran_core::Error::Io { source, .. }))
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                2
            }
            CliError::Config { reason, .. } if reason.starts_with("cannot read") => 2,
            _ => 1,
        }
    }
}
