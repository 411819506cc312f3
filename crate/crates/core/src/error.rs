use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fiber placement failed: {0}")]
    PlacementFailure(String),

    #[error("at least two fibers are required, got {0}")]
    TooFewFibers(usize),

    #[error("empty mesh")]
    EmptyMesh,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("channel `{0}` has degenerate spread (std = {1:e})")]
    DegenerateChannel(String, f64),

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("format violation in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("missing channel `{0}`")]
    MissingChannel(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular elasto-plastic denominator ({0:e})")]
    SingularDenominator(f64),

    #[error("stress update did not converge at pixel ({row}, {col}) in frame {frame}")]
    NonConvergence { row: usize, col: usize, frame: usize },

    #[error("no damage retained above threshold {0}")]
    NoDamage(f64),

    #[error("paths not fully defined: {0} undefined rows")]
    UndefinedRows(usize),

    #[error("misaligned sequences: {0}")]
    Misaligned(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
