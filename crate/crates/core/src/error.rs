use std::fmt;

use thiserror::Error;

/// Where in the block structure a numerical failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// A standalone kernel call with no structural context.
    Block,
    /// Stage `i` (0-based) of the original, unpermuted matrix.
    Stage(usize),
    /// Interior stage `stage` (0-based) of segment `segment` (0-based).
    SegmentStage { segment: usize, stage: usize },
    /// The separator that precedes segment `segment` (0-based, so `segment >= 1`).
    Separator(usize),
    /// The global-variable corner block.
    Corner,
    /// A dense (unstructured) matrix.
    Dense,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Block => write!(f, "block"),
            Location::Stage(i) => write!(f, "stage {i}"),
            Location::SegmentStage { segment, stage } => {
                write!(f, "segment {segment}, stage {stage}")
            }
            Location::Separator(k) => write!(f, "separator before segment {k}"),
            Location::Corner => write!(f, "global corner"),
            Location::Dense => write!(f, "dense matrix"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("not positive definite: pivot {pivot} of {location} is {value:e}")]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        location: Location,
    },

    #[error("singular triangular factor: diagonal entry {pivot} of {location} is zero")]
    SingularFactor { pivot: usize, location: Location },

    #[error("dimension mismatch in {op}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid matrix: {}", .0.join("; "))]
    Invalid(Vec<String>),

    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),

    #[error("infeasible plan: {stages} stages cannot be split across {threads} threads (need at least {})", 2 * .threads)]
    InfeasiblePlan { stages: usize, threads: usize },

    #[error("non-uniform stage sizes are only supported by the sequential solver")]
    NonUniformStages,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Re-tags a kernel-level numerical failure with its structural location.
    pub fn at(self, location: Location) -> Self {
        match self {
            Error::NotPositiveDefinite { pivot, value, .. } => Error::NotPositiveDefinite {
                pivot,
                value,
                location,
            },
            Error::SingularFactor { pivot, .. } => Error::SingularFactor { pivot, location },
            other => other,
        }
    }

    /// True for failures of the numerical kind (SPD or singular factor).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::SingularFactor { .. } | Error::Divergence(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
