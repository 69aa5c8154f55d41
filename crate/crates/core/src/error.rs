use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: unsupported rank {rank}")]
    Rank { op: &'static str, rank: usize },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("dropout probability must lie in [0, 1), got {0}")]
    DropoutProbability(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tap layer {tap} outside encoder depth 1..={depth}")]
    TapOutOfRange { tap: usize, depth: usize },

    #[error("phrase span ({begin}, {end}) invalid for sentence of {len} words")]
    SpanOutOfRange { begin: usize, end: usize, len: usize },

    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("task {task} receives zero updates per cycle (C = {cycle})")]
    StarvedTask { task: String, cycle: usize },

    #[error("contamination: world {world_id} from {split} of {task} appears in a training pool")]
    Contamination {
        world_id: u64,
        task: String,
        split: String,
    },

    #[error("evaluation of {task} on {split} is forbidden under regime {regime}")]
    ForbiddenEvaluation {
        task: String,
        split: String,
        regime: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parsable code for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Axis { .. } | Error::Rank { .. } => "E_SHAPE",
            Error::DataLength { .. } => "E_SHAPE",
            Error::NonScalarRoot(_) => "E_ROOT",
            Error::DropoutProbability(_) => "E_DROPOUT",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::InvalidInput(_) => "E_INPUT",
            Error::TapOutOfRange { .. } => "E_TAP",
            Error::SpanOutOfRange { .. } => "E_SPAN",
            Error::DegenerateBox(_) => "E_BOX",
            Error::Plan(_) => "E_PLAN",
            Error::StarvedTask { .. } => "E_STARVED",
            Error::Contamination { .. } => "E_CONTAMINATION",
            Error::ForbiddenEvaluation { .. } => "E_REGIME",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Parse { .. } => "E_PARSE",
            Error::Io { .. } => "E_IO",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
