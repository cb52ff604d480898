use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation precondition (non-unit quaternion, input out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration failed at step {step} (t = {t:.4} s): {reason}")]
    Integration { step: usize, t: f64, reason: String },

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
