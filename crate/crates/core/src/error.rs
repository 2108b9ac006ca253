use alloc::string::String;

/// Errors raised by the pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("objective is not finite when perturbing coordinate {coord}")]
    NonFinite { coord: usize },
    #[error("token `{0}` is not in the vocabulary")]
    Vocabulary(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid state: {0}")]
    State(&'static str),
    #[error("corrupt frame: {0}")]
    Corrupt(String),
    #[error("malformed blob: {0}")]
    Decode(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
