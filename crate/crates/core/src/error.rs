//! Error type shared by every module of the crate.

use crate::model::ChannelCoefficients;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across model evaluation, fitting, noise
/// generation, and file handling.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A mathematical argument is outside the function's domain
    /// (non-positive time, negative diffusion, and so on).
    #[error("domain error: {0}")]
    Domain(String),

    /// A structurally invalid input: empty dataset, mismatched lengths,
    /// too few samples, rank-deficient design matrix, ...
    #[error("invalid input: {0}")]
    Input(String),

    /// Text that does not follow the trace/surfaces file grammar.
    /// `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The least-squares design matrix for one of the coefficient surfaces
    /// does not have full column rank.
    #[error("{surface} surface regression is rank-deficient: {detail}")]
    RankDeficient {
        surface: &'static str,
        detail: String,
    },

    /// The optimizer left the representable range (non-finite objective).
    /// Carries the last finite iterate when one exists.
    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        last_coefficients: Option<ChannelCoefficients>,
    },

    /// A calibration stage failed; names the stage and the offending trace.
    #[error("calibration stage '{stage}' failed on trace {trace}: {source}")]
    CalibrationStage {
        stage: &'static str,
        trace: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Shorthand used by argument validators.
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Shorthand for structural input errors.
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

/// Checks that `value` is finite and strictly positive.
pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::domain(format!(
            "{name} must be a finite positive number, got {value}"
        )));
    }
    Ok(())
}

/// Checks that `value` is finite (any sign).
pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::domain(format!("{name} must be finite, got {value}")));
    }
    Ok(())
}
