use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("batch too small: need at least {need} samples, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("degenerate dimension: {0}")]
    DegenerateDimension(String),

    #[error("requested subspace size {requested} exceeds numeric rank {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("adaptation diverged: {0}")]
    Divergence(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 divergence, 3 io/serialization.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Divergence(_) => 2,
            Error::Io { .. } | Error::Serialization(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
