use thiserror::Error;

pub type Result<T> = std::result::Result<T, CgtError>;

#[derive(Debug, Error)]
pub enum CgtError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("graph {graph}: invalid {field}: {message}")]
    Validation {
        graph: usize,
        field: &'static str,
        message: String,
    },

    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format version mismatch in {what}: expected {expected}, found {found}")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CgtError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        CgtError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures that originate in the numbers rather than in the
    /// inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CgtError::Numerical(_))
    }
}
