use thiserror::Error;

pub type Result<T> = std::result::Result<T, CdtError>;

#[derive(Debug, Error)]
pub enum CdtError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("data leakage: {0}")]
    Leakage(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{what} mismatch: expected {expected}, found {found}")]
    Mismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("missing inputs: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CdtError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CdtError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
