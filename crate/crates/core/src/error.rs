use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NumericOverflow { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("graph constructor is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("training diverged at task {task}, epoch {epoch}, step {step}: total loss {total}")]
    Divergence {
        task: usize,
        epoch: usize,
        step: u64,
        total: f64,
    },

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
