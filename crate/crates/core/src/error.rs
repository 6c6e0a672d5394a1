use thiserror::Error;

pub type Result<T> = std::result::Result<T, SaeError>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad or inconsistent input data.
    Validation,
    /// The numbers were well-formed but the computation broke down.
    Numerical,
}

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("covariance for area `{area_id}` is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NonPsdCovariance { area_id: String, min_eigenvalue: f64 },

    #[error("non-finite value in field `{field}` of area `{area_id}`")]
    NonFiniteValue { area_id: String, field: String },

    #[error("too few areas: need at least {required}, got {got}")]
    TooFewAreas { required: usize, got: usize },

    #[error("moment matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularMomentMatrix { condition: f64 },

    #[error("total variance sigma2_b + sigma2_delta is not positive for area `{area_id}` ({value:e})")]
    NonPositiveTotalVariance { area_id: String, value: f64 },

    #[error("jackknife degenerate: {0}")]
    JackknifeDegenerate(String),

    #[error("simulation unstable: {failed} of {total} replicates failed for method {method}")]
    SimulationUnstable {
        method: String,
        failed: usize,
        total: usize,
    },

    #[error("area `{0}` has no units")]
    EmptyArea(String),

    #[error("area `{0}` has a single unit; within-area covariance is undefined")]
    SingletonArea(String),

    #[error("non-positive mean or unit value in area `{area_id}` ({value})")]
    NonPositiveMean { area_id: String, value: f64 },

    #[error("insufficient degrees of freedom for pooling (sum n_i - D = {0})")]
    InsufficientDegreesOfFreedom(i64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SaeError {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            SaeError::EmptyDataset => "EmptyDataset",
            SaeError::DimensionMismatch(_) => "DimensionMismatch",
            SaeError::NonPsdCovariance { .. } => "NonPSDCovariance",
            SaeError::NonFiniteValue { .. } => "NonFiniteValue",
            SaeError::TooFewAreas { .. } => "TooFewAreas",
            SaeError::SingularMomentMatrix { .. } => "SingularMomentMatrix",
            SaeError::NonPositiveTotalVariance { .. } => "NonPositiveTotalVariance",
            SaeError::JackknifeDegenerate(_) => "JackknifeDegenerate",
            SaeError::SimulationUnstable { .. } => "SimulationUnstable",
            SaeError::EmptyArea(_) => "EmptyArea",
            SaeError::SingletonArea(_) => "SingletonArea",
            SaeError::NonPositiveMean { .. } => "NonPositiveMean",
            SaeError::InsufficientDegreesOfFreedom(_) => "InsufficientDegreesOfFreedom",
            SaeError::InvalidConfig(_) => "InvalidConfig",
            SaeError::Parse(_) => "Parse",
            SaeError::Csv(_) => "Csv",
            SaeError::Json(_) => "Json",
            SaeError::Io(_) => "Io",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            SaeError::SingularMomentMatrix { .. }
            | SaeError::NonPositiveTotalVariance { .. }
            | SaeError::JackknifeDegenerate(_)
            | SaeError::SimulationUnstable { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Validation,
        }
    }
}
