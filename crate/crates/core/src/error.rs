use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// The variants map onto the CLI exit-code contract: validation-type errors
/// (2), numerical failures (3) and bracketing failures (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("ground state is degenerate (E0 = {energy}, gap = {gap:e})")]
    DegenerateGroundState { energy: f64, gap: f64 },

    #[error("integration failed at t = {time}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("threshold {threshold} not crossed in T bracket [{lo}, {hi}] (F(lo) = {f_lo}, F(hi) = {f_hi}); widen the bracket")]
    Bracket {
        threshold: f64,
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("all {attempts} optimization starts failed: {diagnostics}")]
    AllStartsFailed {
        attempts: usize,
        diagnostics: String,
    },

    #[error("malformed record: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
