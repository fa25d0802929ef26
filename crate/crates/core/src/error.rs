use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across model assembly, decomposition and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(
        "ones vector is not in the column span of the fixed design (residual norm {residual:.3e})"
    )]
    Span { residual: f64 },

    #[error("matrix is not positive-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dependence parameter {0} outside [0, 1)")]
    RhoOutOfRange(f64),

    #[error("invalid adjacency: {0}")]
    AsymmetricAdjacency(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("rule `{rule}`: value {value} is not covered by any bin")]
    BinGap { rule: String, value: f64 },

    #[error("dense oracle refuses N = {n} (limit {limit})")]
    SizeGuard { n: usize, limit: usize },

    #[error("precision is singular after deleting cluster {cluster}")]
    SingularAfterDeletion { cluster: usize },

    #[error("leverage of cluster {cluster} is 1; Cook's distance undefined")]
    LeverageOne { cluster: usize },

    #[error("own weight of observation {index} is not positive")]
    LeverageZero { index: usize },

    #[error("pooling factor of cluster {cluster} is zero")]
    DegeneratePooling { cluster: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("offset at row {index} is not positive ({value})")]
    NonPositiveOffset { index: usize, value: f64 },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("report schema mismatch: {0}")]
    SchemaVersionMismatch(String),

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerical kind (factorizations, degenerate
    /// leverage) as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::SingularAfterDeletion { .. }
                | Error::LeverageOne { .. }
                | Error::LeverageZero { .. }
                | Error::DegeneratePooling { .. }
        )
    }
}
