//! Error type shared by all lab modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what}: point {point:?} lies outside its domain box")]
    OutsideDomain { what: &'static str, point: Vec<f64> },

    #[error("cost |x-y|^p/p with p={exponent} has no second derivatives at x=y (x={x:?})")]
    CostSingularity { x: Vec<f64>, exponent: f64 },

    #[error("degenerate cost: {detail}")]
    DegenerateCost { detail: String },

    #[error("{what}: no solution found (residual {residual:.3e})")]
    NoSolution { what: &'static str, residual: f64 },

    #[error("marginals are not balanced: source mass {source_total}, target mass {target_total}")]
    Imbalance { source_total: f64, target_total: f64 },

    #[error("problem too large: {size} exceeds limit {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("{what}: iteration limit {iters} reached (residual {residual:.3e})")]
    IterationLimit {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("potential is not differentiable at {point:?} (one-sided gradient gap {gap:.3e})")]
    NondifferentiablePoint { point: Vec<f64>, gap: f64 },

    #[error("{what} does not apply here: {detail}")]
    NotApplicable { what: &'static str, detail: String },

    #[error("invalid section: {detail}")]
    InvalidSection { detail: String },

    #[error("degenerate section: {detail}")]
    DegenerateSection { detail: String },

    #[error("not enough resolution: {cells} cells, need at least {needed}")]
    InsufficientResolution { cells: usize, needed: usize },

    #[error("{what} supports dimension <= {max}, got {dim}")]
    UnsupportedDimension {
        what: &'static str,
        dim: usize,
        max: usize,
    },

    #[error("invalid input: {detail}")]
    InvalidInput { detail: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    /// True for errors caused by bad inputs or configuration, as opposed to
    /// numerical failures discovered mid-computation. The CLI maps the two
    /// classes to different exit codes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::DimensionMismatch { .. }
                | LabError::OutsideDomain { .. }
                | LabError::Imbalance { .. }
                | LabError::TooLarge { .. }
                | LabError::NotApplicable { .. }
                | LabError::UnsupportedDimension { .. }
                | LabError::InvalidInput { .. }
        )
    }
}

pub(crate) fn invalid(detail: impl Into<String>) -> LabError {
    LabError::InvalidInput {
        detail: detail.into(),
    }
}
