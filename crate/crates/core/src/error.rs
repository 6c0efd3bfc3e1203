use thiserror::Error;

use crate::score::Condition;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("timestep {t} outside [1, {max}]")]
    Range { t: usize, max: usize },

    #[error("condition {0} is not known to this predictor")]
    UnknownCondition(Condition),

    #[error("training diverged at iteration {iter}: loss = {loss}")]
    Training { iter: usize, loss: f64 },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("optimization diverged at iteration {iter}: {reason}")]
    Diverged { iter: usize, reason: String },

    /// Network-level failure talking to a remote predictor. Safe to retry.
    #[error("transport error (retriable): {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

pub(crate) fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or infinity")))
    }
}
