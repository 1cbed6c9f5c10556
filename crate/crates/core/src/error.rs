use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum BnnError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model build error at layer {layer}: {reason}")]
    Build { layer: usize, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("serialization error")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BnnError> = std::result::Result<T, E>;

impl BnnError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        BnnError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Prefixes the message of numerical errors with extra context.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            BnnError::Numerical(msg) => BnnError::Numerical(format!("{ctx}: {msg}")),
            other => other,
        }
    }
}
