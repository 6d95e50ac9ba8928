use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cut normal lies in the null space of the shape matrix (a'Qa = {0:e})")]
    DegenerateDirection(f64),
    #[error("halfspace does not intersect the ellipsoid (alpha = {0})")]
    EmptyIntersection(f64),
    #[error("relative cut depth {0} outside (-1, 1)")]
    OutOfRange(f64),
    #[error("rejection sampling exhausted: {accepted} accepted out of {draws} draws")]
    ExhaustedRejection { accepted: usize, draws: usize },
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid OCP specification: {0}")]
    InvalidSpec(String),
    #[error("observed state lies outside the predicted first-step set (excess {0:e})")]
    NoSide(f64),
    #[error("objective or residual evaluated to a non-finite value")]
    NonFiniteObjective,
    #[error("callback failed: {0}")]
    Callback(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
