use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("node {node} is out of range for a graph with {count} nodes")]
    InvalidNode { node: usize, count: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("no distant candidates to sample for node {0}")]
    SamplingImpossible(usize),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("unknown {kind} id {id} (vocabulary size {size})")]
    Vocabulary { kind: &'static str, id: usize, size: usize },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("semantic neighbor index is stale: built at epoch {built}, now epoch {now}, refresh interval {interval}")]
    StaleIndex { built: usize, now: usize, interval: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
