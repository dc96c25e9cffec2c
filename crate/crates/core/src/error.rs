use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge (estimate {estimate:e}, error {error:e}, tolerance {tolerance:e})")]
    Quadrature {
        estimate: f64,
        error: f64,
        tolerance: f64,
    },

    #[error("empty lattice sample: no lattice point of spacing h = {h} lies in the support")]
    EmptySample { h: f64 },

    #[error("non-finite particle state at step {step} (particle {particle})")]
    NonFinite { step: usize, particle: usize },

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("grid spacing {dx} on axis {axis} exceeds epsilon/4 = {limit} (blob width {epsilon})")]
    Resolution {
        axis: usize,
        dx: f64,
        epsilon: f64,
        limit: f64,
    },

    #[error("unstable {substep} step: dt = {dt:e} exceeds the stable bound {max_dt:e}")]
    Stability {
        substep: &'static str,
        dt: f64,
        max_dt: f64,
    },

    #[error("possible blow-up at t = {time}: max density grew by a factor {ratio:.3e}")]
    BlowUp { time: f64, ratio: f64 },

    #[error("requested time {requested} exceeds the available horizon {available}")]
    Horizon { requested: f64, available: f64 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("h = {h}{}: {source}", realization.map(|m| format!(", realization {m}")).unwrap_or_default())]
    Provenance {
        h: f64,
        realization: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at(self, h: f64, realization: Option<usize>) -> Self {
        Error::Provenance {
            h,
            realization,
            source: Box::new(self),
        }
    }
}
