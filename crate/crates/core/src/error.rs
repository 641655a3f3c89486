//! Error type shared by every module of the engine.

use alloc::string::String;

/// Failures raised by the engine.
///
/// Variants are grouped so that front ends can map them onto exit codes:
/// [`Error::is_validation`] covers malformed inputs and parameters, everything
/// else is a mathematical failure of the construction.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("field shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported derivative order {order} (maximum {max})")]
    UnsupportedOrder { order: usize, max: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid boundary data: {0}")]
    InvalidData(String),
    #[error("immersion failure at node {node}: Jacobian rank below {rank}")]
    ImmersionFailure { node: usize, rank: usize },
    #[error("amplitude {value} outside the corrugation domain [0, {limit}]")]
    AmplitudeOutOfDomain { value: f64, limit: f64 },
    #[error("coefficient {index} is negative ({value:e}); matrix lies outside the decomposition radius")]
    OutOfRadius { index: usize, value: f64 },
    #[error("margin violation at node {node}: smallest eigenvalue {value:e}")]
    MarginViolation { node: usize, value: f64 },
    #[error("shortness violation at node {node}: metric eigenvalue {value:e} outside [{lo:e}, {hi:e}]")]
    ShortnessViolation { node: usize, value: f64, lo: f64, hi: f64 },
    #[error("step precondition failed: {0}")]
    Precondition(String),
    #[error("frequency {lambda:e} exceeds the grid cap {cap:e}")]
    FrequencyCap { lambda: f64, cap: f64 },
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("extension failure: {0}")]
    ExtensionFailure(String),
    #[error("step {step} failed: {source}")]
    InStep {
        step: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    /// True for errors caused by malformed inputs rather than by the construction.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidGrid(_)
            | Error::ShapeMismatch(_)
            | Error::UnsupportedOrder { .. }
            | Error::InvalidParameter(_)
            | Error::InvalidData(_) => true,
            Error::InStep { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    /// Innermost error, skipping step wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InStep { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
