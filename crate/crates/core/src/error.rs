use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown {kind} name {name:?}")]
    UnknownName { kind: &'static str, name: String },
    #[error("malformed scene graph: {0}")]
    Malformed(String),
    #[error("format error in record {record}: {message}")]
    Format { record: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GraphError {
    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        GraphError::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CaptionError {
    #[error("caption has {len} tokens, limit is {max_len}")]
    CaptionTooLong { len: usize, max_len: usize },
    #[error("scene graph does not match vocabulary: {0}")]
    VocabMismatch(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("shape mismatch: expected {expected:?}, got {got:?}")]
pub struct ShapeError {
    pub expected: (usize, usize),
    pub got: (usize, usize),
}
