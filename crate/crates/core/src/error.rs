use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data at row {row}: {reason}")]
    Malformed { row: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("id mismatch at index {index}: input `{input}` vs generation `{generation}`")]
    IdMismatch {
        index: usize,
        input: String,
        generation: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing dataset with role `{0}`")]
    MissingRole(String),

    #[error("detector mismatch: {0}")]
    DetectorMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    Unknown {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(row: usize, reason: impl Into<String>) -> Self {
        Error::Malformed {
            row,
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 usage, 2 data, 3 numerical guard.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Unknown { .. } | Error::Config(_) => 1,
            Error::Io { .. }
            | Error::Malformed { .. }
            | Error::DimensionMismatch(_)
            | Error::IdMismatch { .. }
            | Error::MissingRole(_)
            | Error::DetectorMismatch(_) => 2,
            Error::Degenerate(_) | Error::Numerical(_) => 3,
        }
    }
}
