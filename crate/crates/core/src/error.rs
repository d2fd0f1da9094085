use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller violated a precondition (shapes, lengths, missing inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared while evaluating the model.
    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// Training blew up; `last_valid_step` is the last step with a finite, bounded loss.
    #[error("dynamics diverged at step {step} (loss {loss:e}); last valid step {last_valid_step:?}")]
    Diverged {
        step: usize,
        loss: f64,
        last_valid_step: Option<usize>,
    },

    #[error("root bracket [{lo}, {hi}] has no sign change (f(lo) = {f_lo:e}, f(hi) = {f_hi:e})")]
    NoSignChange { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("meta-optimizer did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize, history: Vec<f64> },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::Diverged { .. }
                | Error::NoSignChange { .. }
                | Error::NonConvergence { .. }
        )
    }
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {value}")))
    }
}
