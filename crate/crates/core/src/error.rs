use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {reason}")]
    BadCell {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("duplicate timestamp for subject `{subject}` at time {time}")]
    DuplicateTimestamp { subject: String, time: f64 },

    #[error("invalid view: {0}")]
    InvalidView(String),

    #[error("all features are constant")]
    AllFeaturesConstant,

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("cannot split {subjects} subjects into {folds} folds")]
    TooFewSubjects { subjects: usize, folds: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sparsity count {k} out of range 1..={len}")]
    SparsityOutOfRange { k: usize, len: usize },

    #[error("zero variance")]
    ZeroVariance,

    #[error("zero-norm latent vector")]
    ZeroNorm,

    #[error("design matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("mixed model fit failed: {0}")]
    LmeFailure(String),

    #[error("linear algebra failure: {0}")]
    LinAlg(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("every fold failed for every grid cell")]
    NoValidCell,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::MissingColumn(_) => "missing_column",
            Error::BadCell { .. } => "bad_cell",
            Error::DuplicateTimestamp { .. } => "duplicate_timestamp",
            Error::InvalidView(_) => "invalid_view",
            Error::AllFeaturesConstant => "all_features_constant",
            Error::TooFewRows { .. } => "too_few_rows",
            Error::TooFewSubjects { .. } => "too_few_subjects",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SparsityOutOfRange { .. } => "sparsity_out_of_range",
            Error::ZeroVariance => "zero_variance",
            Error::ZeroNorm => "zero_norm",
            Error::RankDeficient(_) => "rank_deficient",
            Error::LmeFailure(_) => "lme_failure",
            Error::LinAlg(_) => "linalg",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::NoValidCell => "no_valid_cell",
        }
    }
}
