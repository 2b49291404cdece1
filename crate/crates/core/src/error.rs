use thiserror::Error;

pub type Result<T> = std::result::Result<T, CdstError>;

#[derive(Debug, Error)]
pub enum CdstError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}, column '{column}': {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("unknown column '{0}'")]
    UnknownColumn(String),

    #[error("no data rows")]
    EmptyData,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix not positive definite after jitter escalation: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("EM produced a non-finite iterate at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("row {row}: {message}")]
    Domain { row: usize, message: String },

    #[error("fold {fold}, model {model}: {source}")]
    Fit {
        fold: usize,
        model: usize,
        #[source]
        source: Box<CdstError>,
    },
}

impl CdstError {
    /// True for failures of the numerical pipeline (singular systems,
    /// divergence, non-finite values) as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            CdstError::Singular(_) | CdstError::NonFinite(_) | CdstError::Diverged { .. } => true,
            CdstError::Fit { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> CdstError {
    CdstError::InvalidArgument(msg.into())
}
