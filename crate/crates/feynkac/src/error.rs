use thiserror::Error;

#[derive(Debug, Error)]
pub enum FkError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("scale function out of range at t = {t}: q* does not reach 1/t inside [1e-8, 1e12]")]
    RhoOutOfRange { t: f64 },

    #[error("grid too small: mass defect {defect:.3e} exceeds tolerance {tol:.1e}; try L >= {suggested_l:.1}")]
    GridTooSmall { defect: f64, tol: f64, suggested_l: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("series does not contract: {0}")]
    NonContracting(String),

    #[error("divergent integral: {0}")]
    Divergent(String),

    #[error("residual check failed: {0}")]
    ResidualCheck(String),

    #[error("certificate unavailable: {0}")]
    CertificateUnavailable(String),

    #[error("no admissible envelope: {0}")]
    NoEnvelope(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FkError>;
