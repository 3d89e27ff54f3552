use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no human-object pair survives filtering")]
    EmptyPairSet,

    #[error("missing embedding for key `{0}`")]
    MissingEmbedding(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("unknown id {id} in {registry} registry")]
    UnknownId { registry: &'static str, id: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at record {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(context: impl Into<String>, expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        context: context.into(),
        expected,
        got,
    }
}
