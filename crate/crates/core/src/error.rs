use std::path::PathBuf;

/// Errors surfaced by every layer of the pipeline.
///
/// Each variant maps to a stable, machine-parseable category string and a
/// process exit code so the CLI and the C ABI can report failures uniformly.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("resource ceiling exceeded: {0}")]
    Resource(String),

    #[error("non-finite value at step {step} (parameter `{param}`)")]
    Numerical { step: usize, param: String },

    #[error("self-check failed: {0}")]
    Verify(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Data(_) => "data",
            Error::CheckpointNotFound(_) => "checkpoint_not_found",
            Error::Shape { .. } => "shape",
            Error::Resource(_) => "resource",
            Error::Numerical { .. } => "numerical",
            Error::Verify(_) => "verify_failed",
        }
    }

    /// 0 success, 1 usage/config, 2 data, 3 resource ceiling, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Data(_) | Error::CheckpointNotFound(_) | Error::Shape { .. } => 2,
            Error::Resource(_) => 3,
            Error::Numerical { .. } | Error::Verify(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
