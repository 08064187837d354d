use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node index {index} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { index: usize, num_nodes: usize },

    #[error("self-loop at node {0} is not allowed")]
    SelfLoop(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("diagonal block of node {node} is not a scalar multiple of the identity (deviation {deviation:.3e})")]
    NonConformal { node: usize, deviation: f64 },

    #[error("mask selects no nodes")]
    EmptyMask,

    #[error("ROC AUC needs both classes among the masked nodes")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error at line {line}, column {column}: {source}")]
    Json {
        line: usize,
        column: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl From<serde_json::Error> for Error {
    fn from(source: serde_json::Error) -> Self {
        Error::Json {
            line: source.line(),
            column: source.column(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
