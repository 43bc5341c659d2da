//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building, running or checking an emulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A named weight does not fit the input it is applied to.
    #[error("weight {name} has shape {got:?}, expected {expected}")]
    Weight {
        name: &'static str,
        got: (usize, usize),
        expected: String,
    },

    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An index is out of range.
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    /// A non-finite value was produced or supplied.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The requested accuracy cannot be certified within the numerical guards.
    #[error("planning infeasible: {reason}; smallest achievable eps is about {smallest_eps:.3e}")]
    Infeasible { reason: String, smallest_eps: f64 },

    /// A prompt falls outside the range the frozen weights were planned for.
    #[error("replan required: {0}")]
    ReplanRequired(String),

    /// A linear system is (numerically) singular.
    #[error("singular system: {0}")]
    Singular(String),

    /// An iterative solver did not converge.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// A backward pass was fed a cache from a different forward pass.
    #[error("stale cache: {0}")]
    StaleCache(String),

    /// A frozen model was asked to change its parameters.
    #[error("model is frozen; parameter writes are rejected")]
    Frozen,

    /// Malformed external data (CSV, JSON, config).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
