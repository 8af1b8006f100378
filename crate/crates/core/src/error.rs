use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("ingestion error for video `{video_id}`: {message}")]
    Ingest { video_id: String, message: String },

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint specs do not match the run configuration:\n{0}")]
    SpecMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    ///
    /// 2 covers configuration and input problems, 3 covers validation of
    /// submissions against ground truth, 1 is reserved for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 3,
            Error::NonFiniteLoss { .. } => 1,
            Error::Shape(_)
            | Error::Config(_)
            | Error::Input(_)
            | Error::Ingest { .. }
            | Error::Decode { .. }
            | Error::Conflict(_)
            | Error::Checkpoint(_)
            | Error::SpecMismatch(_)
            | Error::Io { .. }
            | Error::Csv { .. } => 2,
        }
    }
}
