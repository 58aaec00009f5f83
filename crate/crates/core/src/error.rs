use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("A is not in companion form: {0}")]
    Structure(String),
    #[error("parameter outside its declared box: {0}")]
    Box(String),
    #[error("input gain b must be positive, got {0}")]
    Sign(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("grid invalid: {0}")]
    Grid(String),
    #[error("non-finite state at t = {t}: {what}")]
    NonFinite { t: f64, what: String },
    #[error("barrier partial of order {order} with respect to t is not registered")]
    PartialMissing { order: usize },
    #[error("division by zero: {0}")]
    DivideByZero(String),
    #[error("gain condition violated at kappa_{index}: {reason}")]
    Gain { index: usize, reason: String },
    #[error("successive approximations did not converge: last increment {increment:e} after {iterations} iterations")]
    Convergence { iterations: usize, increment: f64 },
    #[error("dh/dy1 vanished at t = {0}")]
    ThetaZero(f64),
    #[error("requested Taylor order {requested} needs time derivatives of p(0,t) beyond order {available}")]
    Order { requested: usize, available: usize },
    #[error("M bound denominator degenerate: {0}")]
    Denominator(String),
    #[error("M invalid ({branch}): {reason}")]
    MValue { branch: String, reason: String },
    #[error("signal log does not cover window [{start}, {end}]")]
    Window { start: f64, end: f64 },
    #[error("identification modes disagree: {0}")]
    Inconsistency(String),
    #[error("Lyapunov equation singular: {0}")]
    Singular(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
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
