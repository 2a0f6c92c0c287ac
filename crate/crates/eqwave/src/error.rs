//! Error type shared by all solvers and the CLI.

use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, EqwaveError>;

#[derive(Debug, Error)]
pub enum EqwaveError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("model evaluation produced non-finite values ({context})")]
    NonFinite { context: String },

    #[error(
        "Newton iteration did not converge after {iterations} iterations \
         (residual {residual:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        residual: f64,
        /// Last iterate, flattened; lets callers inspect or restart.
        last_iterate: Vec<f64>,
    },

    #[error("Jacobian is rank-deficient or singular ({context})")]
    RankDeficient { context: String },

    #[error("branch under-resolved: lift increment {delta:.4} rad exceeds {max:.4} rad")]
    UnderResolved { delta: f64, max: f64 },

    #[error("no feedback: M2 vanishes, the continuous spectrum degenerates")]
    NoFeedback,

    #[error("resolution insufficient: {0}")]
    Resolution(String),

    #[error("classification is marginal: {0}")]
    Marginal(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate solution: {0}")]
    Degenerate(String),

    #[error("trajectory diverged at t = {t:.6} (|x| = {norm:.3e})")]
    Divergence { t: f64, norm: f64 },

    #[error("derivative unavailable: {0}")]
    DerivativeUnavailable(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
