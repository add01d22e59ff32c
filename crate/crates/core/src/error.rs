use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in `{operand}`: {detail}")]
    Dimension { operand: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error in `{name}`: {detail}")]
    Numeric { name: String, detail: String },

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("point is behind the camera (camera-frame z = {z})")]
    BehindCamera { z: f64 },

    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("parse error in {} at line {line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(operand: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            operand: operand.into(),
            detail: detail.into(),
        }
    }

    pub fn numeric(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            name: name.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 0 success, 1 check failure, 2 usage, 3 contract, 4 numeric,
    /// 5 compatibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric { .. } => 4,
            Error::Compatibility(_) => 5,
            _ => 3,
        }
    }
}
