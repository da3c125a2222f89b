//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ---- data ingestion ----
    #[error("column `{0}` not found in data")]
    MissingColumn(String),
    #[error("no usable rows after filtering ({dropped} dropped)")]
    EmptyData { dropped: usize },
    #[error("row {row}: cannot parse `{value}` as a number")]
    ParseNumber { row: usize, value: String },
    #[error("io error reading `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    // ---- formula ----
    #[error("formula syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("multiplicative fixed factor `{0}` is not part of the mean structure")]
    MultFixedNotInMean(String),
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("factor `{0}` has fewer than 2 levels")]
    DegenerateFactor(String),
    #[error("response `{expected}` does not match the data's response column `{found}`")]
    ResponseMismatch { expected: String, found: String },

    // ---- likelihood / optimization ----
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parameter overflow: non-finite {0}")]
    NonFinite(&'static str),
    #[error("curvature matrix is not positive definite (variance near zero or |rho| near 1)")]
    IndefiniteCurvature,
    #[error("marginal covariance matrix is not positive definite")]
    CovarianceDegenerate,
    #[error("direct marginal oracle limited to n <= {cap}, got n = {n}")]
    OracleSize { n: usize, cap: usize },
    #[error("gradient overflow: non-finite component {0}")]
    GradientOverflow(usize),
    #[error("objective is not finite at the starting point")]
    BadStart,
    #[error("term `{0}` is not in the model")]
    TermNotInModel(String),

    // ---- inference ----
    #[error("nesting violation: 2*(nll_null - nll_full) = {0} is negative")]
    NestingViolation(f64),
    #[error("the scaling analysis requires replicate measurements per cell")]
    MamRequiresReplicates,
    #[error("the scaling analysis requires a balanced two-way layout")]
    MamRequiresBalance,
    #[error("insufficient denominator degrees of freedom: (I-1)(J-2) = {0}")]
    InsufficientDf(i64),
    #[error("invalid confidence level {0}; must be in (0, 1)")]
    InvalidLevel(f64),
    #[error("contrast has no nonzero coefficient")]
    NullContrast,

    // ---- methodcomp ----
    #[error("invalid covariance parameters: {0}")]
    InvalidCovariance(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
