use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0}: only 1 and 2 are supported")]
    UnsupportedDimension(usize),

    #[error("grid needs at least 8 nodes per axis, got {0}")]
    GridTooCoarse(usize),

    #[error("field has {got} values but the grid has {expected} nodes")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("non-finite value at node {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource distribution is not admissible: {0}")]
    Inadmissible(String),

    #[error(
        "Newton solver did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system (zero pivot at row {0})")]
    Singular(usize),

    #[error("{what} is not positive: minimum {min:e}")]
    PositivityViolation { what: &'static str, min: f64 },

    #[error("inactive set has {nodes} nodes, need more than {needed}")]
    InactiveSetTooSmall { nodes: usize, needed: usize },

    #[error("eigen-solver failed: {0}")]
    IterationFailure(String),

    #[error("criterion hypothesis violated: {0}")]
    CriterionHypothesis(String),

    #[error("geometry violation: {0}")]
    Geometry(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
