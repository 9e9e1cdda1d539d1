use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite drift at x={x:?}, t={t}")]
    NonFiniteDrift { x: Vec<f64>, t: f64 },
    #[error("path {path} left the bound {bound} at t={t} (x={x:?})")]
    Explosion { path: usize, t: f64, bound: f64, x: Vec<f64> },
    #[error("stability condition violated: {0}")]
    Stability(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, history: Vec<f64> },
    #[error("support violation: {0}")]
    Support(String),
    #[error("training diverged at step {step}: loss {loss:e} vs initial {initial:e}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
