use thiserror::Error;

/// Errors produced by the solvers and loaders.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: presets, grids, tables.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A precondition on the model was not met (for instance R0 <= 1 where
    /// an invasion is required).
    #[error("outside model domain: {0}")]
    Domain(String),

    /// An iterative method hit its sweep cap.
    #[error("{what} did not converge after {iterations} iterations (last change {last_change:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last_change: f64,
    },

    /// A bracketing or ordering guarantee was violated.
    #[error("bracket violation: {0}")]
    Bracket(String),

    /// A residual or acceptance tolerance was not met.
    #[error("{what}: residual {residual:e} exceeds tolerance {tolerance:e}")]
    Residual {
        what: &'static str,
        residual: f64,
        tolerance: f64,
    },

    /// The front came too close to the edge of the spatial grid.
    #[error("domain too small: {0}")]
    Boundary(String),

    /// NaN or infinity appeared in a computed field.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Bracket(_)
                | Error::Residual { .. }
                | Error::Boundary(_)
                | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
