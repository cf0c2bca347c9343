use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input `{field}`: {reason}")]
    InvalidInput { field: String, reason: String },

    #[error("position is not inside a trapping well (cos(2kx0) = {cos_2kx0:e})")]
    NotAWell { cos_2kx0: f64 },

    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: u64 },

    #[error("sample rate {sample_rate_hz} Hz aliases content up to {max_content_hz} Hz")]
    Aliasing { sample_rate_hz: f64, max_content_hz: f64 },

    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),

    #[error("insufficient data: {detections} detections, need at least {required}")]
    InsufficientData { detections: usize, required: usize },

    #[error("window of {window_s} s is shorter than the required {required_s} s")]
    WindowTooShort { window_s: f64, required_s: f64 },

    #[error("undefined equilibrium: both damping rates are zero")]
    UndefinedEquilibrium,

    #[error("inconsistent observation: discriminant {discriminant:e} below tolerance -{tolerance:e}")]
    InconsistentObservation { discriminant: f64, tolerance: f64 },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
