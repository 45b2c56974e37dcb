use std::path::PathBuf;

pub type Result<T, E = DgaError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DgaError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("scene error: {0}")]
    Scene(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path}, record {record} (line {line}): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        record: usize,
        message: String,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("incompatible {field}: {message}")]
    Compatibility { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid flag: {0}")]
    Flag(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DgaError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        DgaError::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        DgaError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DgaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            DgaError::Flag(_) => 2,
            DgaError::Compatibility { .. } => 4,
            _ => 3,
        }
    }
}
