use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed WAV at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported WAV format at byte offset {offset}: field `{field}` is {value}, expected {expected}")]
    UnsupportedFormat {
        offset: usize,
        field: &'static str,
        value: String,
        expected: &'static str,
    },

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible alignment: target of length {target_len} needs at least {required} frames, got {frames}")]
    InfeasibleAlignment {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint schema error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
