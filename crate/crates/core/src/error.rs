use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance matrix is numerically singular (condition number {condition:.3e} exceeds {bound:.3e})")]
    SingularCovariance { condition: f64, bound: f64 },

    #[error("market price of risk norm {norm} exceeds the configured bound {bound}")]
    MarketPriceOfRiskBound { norm: f64, bound: f64 },

    #[error("initial wealth must be positive, got {0}")]
    NonpositiveInitialWealth(f64),

    #[error("wealth must be positive, got {0}")]
    NonpositiveWealth(f64),

    #[error("degenerate distortion: {0}")]
    DegenerateDistortion(String),

    #[error("adaptive quadrature did not reach tolerance {tolerance:e} (estimated error {estimate:e})")]
    QuadratureFailure { tolerance: f64, estimate: f64 },

    #[error("risk bound {bound} is outside [{min}, 1)")]
    InvalidRiskBound { bound: f64, min: f64 },

    #[error("constraint set is unbounded along the requested direction (radius above {0:e})")]
    UnboundedDirection(f64),

    #[error("picard iteration did not converge after {iterations} iterations (last sup-delta {last_delta:e})")]
    NoConvergence { iterations: usize, last_delta: f64 },

    #[error("regression Gram matrix is rank deficient at step {step}")]
    RegressionRankDeficient { step: usize },

    #[error("pre-image residual {0:e} exceeds tolerance")]
    PreimageResidual(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable variant name for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidParameter(_) => "InvalidParameter",
            Self::SingularCovariance { .. } => "SingularCovariance",
            Self::MarketPriceOfRiskBound { .. } => "MarketPriceOfRiskBound",
            Self::NonpositiveInitialWealth(_) => "NonpositiveInitialWealth",
            Self::NonpositiveWealth(_) => "NonpositiveWealth",
            Self::DegenerateDistortion(_) => "DegenerateDistortion",
            Self::QuadratureFailure { .. } => "QuadratureFailure",
            Self::InvalidRiskBound { .. } => "InvalidRiskBound",
            Self::UnboundedDirection(_) => "UnboundedDirection",
            Self::NoConvergence { .. } => "NoConvergence",
            Self::RegressionRankDeficient { .. } => "RegressionRankDeficient",
            Self::PreimageResidual(_) => "PreimageResidual",
        }
    }
}
