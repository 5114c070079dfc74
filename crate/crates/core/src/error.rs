use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("operation requires a nonatomic distribution, got {0}")]
    AtomicDistribution(&'static str),

    #[error("unstable load {0} (must be < 1)")]
    Unstable(f64),

    #[error("quadrature did not converge: estimate {estimate}, achieved relative error {achieved:e} after {evaluations} evaluations")]
    Quadrature {
        estimate: f64,
        achieved: f64,
        evaluations: usize,
    },

    #[error("series did not converge after {0} terms")]
    Series(usize),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unknown figure id `{0}`")]
    UnknownFigure(String),

    #[error("event queue corrupted: {0}")]
    Corrupted(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
