use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("communication failure on rank {rank}: {detail}")]
    Transport { rank: usize, detail: String },

    #[error("collective timed out on rank {rank} waiting for rank {waiting_on}")]
    Timeout { rank: usize, waiting_on: usize },

    #[error("replica divergence detected: {0}")]
    ReplicaDivergence(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::NonFinite(_) | Error::Numerical(_) | Error::ReplicaDivergence(_) => 3,
            Error::Transport { .. } | Error::Timeout { .. } => 4,
            Error::Shape { .. } => 2,
            Error::Format(_) | Error::Io(_) => 1,
        }
    }
}
