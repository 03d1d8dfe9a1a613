use thiserror::Error;

pub type Result<T> = std::result::Result<T, NomError>;

#[derive(Debug, Error)]
pub enum NomError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("check suite failed: {0}")]
    CheckFailed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl NomError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NomError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid_shape(op: &'static str, detail: impl Into<String>) -> Self {
        NomError::InvalidShape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        NomError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        NomError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 0 success, 1 usage/config, 2 numerical failure, 3 check-suite failure,
    /// 4 missing or unreadable input file.
    pub fn exit_code(&self) -> i32 {
        match self {
            NomError::Numerical(_) => 2,
            NomError::CheckFailed(_) => 3,
            NomError::Io { .. } => 4,
            _ => 1,
        }
    }
}
