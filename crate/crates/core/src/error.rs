use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("time must be positive, got t = {0}")]
    NonPositiveTime(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite state at step {step}, mode {mode} (value {value})")]
    NonFinite {
        step: usize,
        mode: usize,
        value: f64,
    },

    #[error("quadrature mass concentrated on {nodes} node(s); widen the grid")]
    DegenerateQuadrature { nodes: usize },

    #[error("effective sample size {ess:.1} below reliability floor {floor:.1}")]
    Unreliable { ess: f64, floor: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        trajectory: Vec<f64>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn ensure_positive_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTime(t))
    }
}

pub(crate) fn ensure_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}
