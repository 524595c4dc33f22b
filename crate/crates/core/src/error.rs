use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("potential is not positive at the queried point (value {value})")]
    NonPositivePotential { value: f64 },

    #[error("field has no second derivatives and finite-difference fallback is disabled")]
    MissingHessian,

    #[error("field has no first derivatives")]
    MissingGradient,

    #[error("trajectory left the ball of radius {radius} at t = {time} (point {point})")]
    BlowUp { time: f64, point: usize, radius: f64 },

    #[error("quadrature grid has {nodes} nodes but the flow state carries {points} points")]
    GridMismatch { nodes: usize, points: usize },

    #[error("rate window holds {available} recorded times, need at least {required}")]
    WindowTooShort { available: usize, required: usize },

    #[error("radial quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("integrability probe failed: {0}")]
    IntegrabilityProbeFailed(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
