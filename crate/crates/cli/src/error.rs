use std::path::PathBuf;

use pmts_core::data::DataError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Data(_) | CliError::Io { .. } => exit::DATA,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Internal(_) => exit::INTERNAL,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<pmts_core::Error> for CliError {
    fn from(e: pmts_core::Error) -> Self {
        use pmts_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Spec(_) => CliError::Usage(msg),
            E::Data(DataError::Invalid(_)) => CliError::Usage(msg),
            E::Data(_) | E::Checkpoint(_) | E::Io { .. } | E::EmptyBatch => CliError::Data(msg),
            E::NonFinite(_) | E::DegenerateVariance(_) => CliError::Numeric(msg),
            E::Dim { .. } | E::ShapeMismatch { .. } | E::Alignment { .. } | E::Contract(_) => CliError::Internal(msg),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        pmts_core::Error::from(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
