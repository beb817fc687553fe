use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate warp: {0}")]
    DegenerateWarp(&'static str),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("grid too small: need at least {min}x{min}, got {height}x{width}")]
    GridTooSmall { min: usize, height: usize, width: usize },
    #[error("region out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("input too small for extractor: {0}")]
    InputTooSmall(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("damped Hessian is numerically singular (untextured input?)")]
    SingularHessian,
    #[error("no valid pixels overlap between warped image and template")]
    NoOverlap,
    #[error("tape is incomplete: {0}")]
    IncompleteTape(&'static str),
    #[error("training diverged at step {step}: non-finite batch loss")]
    DivergenceDetected { step: usize },
    #[error("source too small: {0}")]
    SourceTooSmall(String),
    #[error("rejection budget exhausted after {0} attempts")]
    RejectionBudgetExhausted(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
