use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("step size underflow at t = {t} (dt = {dt:e})")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("mass drift {drift:e} exceeds tolerance {tol:e} at t = {t}")]
    MassDrift { t: f64, drift: f64, tol: f64 },

    #[error(
        "truncation saturated: density {density:e} in top bin exceeds {threshold:e} at t = {t}"
    )]
    TruncationSaturation {
        t: f64,
        density: f64,
        threshold: f64,
    },

    #[error("negative density {value:e} at index {index}, t = {t}")]
    Negativity { t: f64, index: usize, value: f64 },

    #[error("fixed-point iteration did not converge in {iterations} iterations at t = {t}")]
    FixedPointNonConvergence { t: f64, iterations: usize },

    #[error("L = {value} fell below floor {floor} at t = {t}")]
    LBelowFloor { t: f64, value: f64, floor: f64 },

    #[error("characteristic escaped beyond x_max = {x_max} (reached {x})")]
    CharacteristicEscape { x: f64, x_max: f64 },

    #[error("root not bracketed on [{lo}, {hi}]")]
    RootBracket { lo: f64, hi: f64 },

    #[error("empty distribution")]
    EmptyDistribution,

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("time {t} outside history domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("series too short: {len} samples, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("time mismatch: {left} vs {right}")]
    TimeMismatch { left: f64, right: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
