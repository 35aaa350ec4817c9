use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("spectrum has no sign change: {0}")]
    NoSplitting(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("semigroup on the {block} block is only defined for {requirement}, got t = {t}")]
    WrongTimeDirection {
        block: &'static str,
        requirement: &'static str,
        t: f64,
    },

    #[error("resonance at mode k = {mode}: shifted eigenvalue {value:e} vanishes")]
    Resonance { mode: usize, value: f64 },

    #[error("grid of {grid} points cannot resolve power {p} of {modes} modes (need at least {required})")]
    InsufficientGrid {
        grid: usize,
        modes: usize,
        p: f64,
        required: usize,
    },

    #[error("time {t} is not a node of the grid with step {dt}")]
    OffGrid { t: f64, dt: f64 },

    #[error("path window [{have_min}, {have_max}] does not cover [{need_min}, {need_max}]")]
    WindowExhausted {
        have_min: f64,
        have_max: f64,
        need_min: f64,
        need_max: f64,
    },

    #[error("vector is not supported on the unstable subspace (max stable coefficient {0:e})")]
    NotUnstable(f64),

    #[error("contraction not certified: SC = {0} >= 1")]
    NotContracting(f64),

    #[error("fixed-point iteration did not converge in {iterations} iterations (last increment {increment:e})")]
    NoConvergence { iterations: usize, increment: f64 },

    #[error("|xi|_alpha = {norm} lies outside the chart radius {radius}")]
    OutsideChart { norm: f64, radius: f64 },

    #[error(
        "bisection on the truncation radius failed to bracket SC = {target} in [{lo:e}, {hi:e}]"
    )]
    NoBracket { target: f64, lo: f64, hi: f64 },

    #[error("degenerate sampling: {0}")]
    DegenerateSampling(String),

    #[error("configuration error: {0}")]
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
