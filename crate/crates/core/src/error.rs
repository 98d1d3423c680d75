use thiserror::Error;

use crate::schemes::SchemeKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value {value} lies outside [0, 1]")]
    Domain { value: f64 },

    #[error("coefficient {value} at interface {interface} (step {step}) is outside the CFL range (0, 1/2)")]
    CflViolation {
        value: f64,
        interface: usize,
        step: usize,
    },

    #[error("the {0} scheme is not differentiable; gradients are available for TRM and Lax-Friedrichs only")]
    UnsupportedScheme(SchemeKind),

    #[error("the set of observed columns is empty")]
    EmptyObservationSet,

    #[error("coefficient {0} has no logit preimage; it must lie in (0, 1/2)")]
    InverseOutOfRange(f64),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("no vehicle with a positive length")]
    NoVehicles,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
