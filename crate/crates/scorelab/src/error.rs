use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("covariance is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("mixture weights invalid: {0}")]
    InvalidWeights(String),

    #[error("density undefined for this distribution kind")]
    DensityUndefined,

    #[error("score undefined at t = 0 for a singular law; noise first via the forward process")]
    ScoreUndefinedAtZero,

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("calibration failed to converge after {iterations} iterations (last error {last:.6e}, target {target:.6e})")]
    CalibrationFailed {
        iterations: usize,
        last: f64,
        target: f64,
    },

    #[error("nonfinite value encountered: {0}")]
    NonFinite(String),

    #[error("score evaluation produced a nonfinite value at step {step}")]
    NonFiniteScore { step: usize },

    #[error("step size too coarse for requested early stop (t = {t:.3e} rounds to zero steps of h = {h:.3e})")]
    EarlyStopTooCoarse { t: f64, h: f64 },

    #[error("step size guard violated: h = {h:.3e} exceeds {limit:.3e} required by the h <~ 1/L hypothesis (L = {lipschitz:.3e})")]
    StepSizeGuard { h: f64, limit: f64, lipschitz: f64 },

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("singular normal equations: {0}")]
    SingularFit(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("mismatched divergence pair ids: {left:?} vs {right:?}")]
    MismatchedPair {
        left: Option<String>,
        right: Option<String>,
    },

    #[error("refusing TV estimate for dimension {0} > 3: bias uncontrolled")]
    TvDimensionTooLarge(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
