use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed container. `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite value in tensor `{tensor}` at element {index} (byte {offset})")]
    NonFinite {
        tensor: String,
        index: usize,
        offset: u64,
    },

    #[error("shape error at op {op}: {message}")]
    Shape { op: usize, message: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate pruning threshold (e == 0)")]
    DegenerateThreshold,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("graph state error: {0}")]
    State(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("checksum mismatch in layer `{layer}`")]
    Checksum { layer: String },

    #[error("optimization diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
