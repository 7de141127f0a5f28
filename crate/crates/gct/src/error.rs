use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. CLI maps `Diverged` to exit code 3 and every other
/// variant to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown {kind} code {code} for vocabulary of size {size}")]
    Vocab {
        kind: &'static str,
        code: u32,
        size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("encounter {id} carries no edge list")]
    MissingEdges { id: u64 },

    #[error("non-finite gradient for parameter {param}")]
    Optimizer { param: String },

    #[error("training diverged (non-finite loss) at iteration {iteration}")]
    Diverged { iteration: u64 },

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 3 for numeric divergence, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
