use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("node `{node}`: {msg}")]
    Node { node: String, msg: String },

    #[error("weight error at `{node}`: {msg}")]
    Weight { node: String, msg: String },

    #[error("non-finite value produced by node `{0}`")]
    NonFinite(String),

    #[error("malformed weight file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn node(node: &str, msg: impl Into<String>) -> Self {
        Error::Node {
            node: node.to_string(),
            msg: msg.into(),
        }
    }
}
