use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmcError>;

#[derive(Debug, Error)]
pub enum CmcError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("insufficient negatives: batch of {0} instances (need at least 2)")]
    InsufficientNegatives(usize),
    #[error("oracle scope exceeded: {0}")]
    OracleScope(String),
    #[error("registration error: {0}")]
    Registration(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("container format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Internal,
}

impl CmcError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CmcError::Config(_) | CmcError::Json(_) | CmcError::SpecMismatch(_) => {
                ErrorCategory::Config
            }
            CmcError::Data(_)
            | CmcError::Io(_)
            | CmcError::Format(_)
            | CmcError::Registration(_)
            | CmcError::Coverage(_) => ErrorCategory::Data,
            CmcError::NonFinite { .. }
            | CmcError::Divergence(_)
            | CmcError::DegenerateEmbedding(_)
            | CmcError::DegenerateBatch(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Internal,
        }
    }
}
