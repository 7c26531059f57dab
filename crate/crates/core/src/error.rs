//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where the operation is defined
    /// (point off the chart, diagonal input to a non-smooth gauge, parameter
    /// outside a lemma range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A trajectory left the chart domain during integration.
    #[error("trajectory left the chart domain at t = {exit_time}")]
    Escape { exit_time: f64 },

    /// Singular metric, non-finite value or other floating-point breakdown.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An iterative procedure did not reach its tolerance.
    #[error("failed to converge: {0}")]
    Convergence(String),

    /// Two near-antipodal points admit more than one minimizing geodesic.
    #[error("ambiguous geodesic between near-antipodal points (distance {distance})")]
    AmbiguousGeodesic { distance: f64 },

    /// Name not present in the estimate registry.
    #[error("unknown estimate name {0:?}")]
    UnknownEstimate(String),

    /// Regression design matrix carries no usable information.
    #[error("degenerate regression basis: {0}")]
    DegenerateBasis(String),

    /// A Monte-Carlo answer would be dominated by truncation or overflow.
    #[error("unreliable estimate: {0}")]
    Unreliable(String),

    /// The operation is only implemented for flat target charts.
    #[error("unsupported target: {0}")]
    UnsupportedTarget(String),

    /// Configuration value rejected during validation; `field` is the
    /// dotted path of the offending entry.
    #[error("invalid config value at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
