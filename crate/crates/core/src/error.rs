use std::io;

use thiserror::Error;

pub type Result<T, E = DesError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DesError {
    /// Shapes or extents that no operation accepts.
    #[error("rejected input in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {what} at coordinate {coordinate}")]
    NonFinite { what: String, coordinate: usize },

    #[error("invalid config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("malformed PPM at byte {offset}: {detail}")]
    Ppm { offset: usize, detail: String },

    #[error("malformed PGM at byte {offset}: {detail}")]
    Pgm { offset: usize, detail: String },

    #[error("annotation parse error at line {line}: element <{element}>: {detail}")]
    Xml {
        element: String,
        line: usize,
        detail: String,
    },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("invalid annotation: {0}")]
    Validation(String),

    #[error("malformed tensor file: {0}")]
    TensorFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DesError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DesError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        DesError::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
