use thiserror::Error;

/// Errors raised anywhere in the surrogate / dispatch pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("missing slack bus")]
    MissingSlack,

    #[error("multiple slack buses (ids {0:?})")]
    MultipleSlack(Vec<usize>),

    #[error("dangling bus reference {bus} in {table} row {row}")]
    DanglingBus {
        table: &'static str,
        row: usize,
        bus: usize,
    },

    #[error("zero reactance on branch row {0}")]
    ZeroReactance(usize),

    #[error("invalid case data: {0}")]
    InvalidCase(String),

    #[error("grid is not connected: {0}")]
    Connectivity(String),

    #[error("singular Jacobian at Newton iteration {0}")]
    SingularJacobian(usize),

    #[error("power flow did not converge (mismatch {mismatch:.3e} after {iterations} iterations)")]
    NotConverged { iterations: usize, mismatch: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("too many diverged power flows: {diverged} of {total}")]
    Divergence { diverged: usize, total: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("factorization failed after jitter ladder {0:?}")]
    Factorization(Vec<f64>),

    #[error("no restart produced a finite objective")]
    TrainingFailed,

    #[error("rank-deficient least-squares system")]
    RankDeficient,

    #[error("invalid participation factors: {0}")]
    Participation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadratic subproblem failed: {0}")]
    Qp(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dataset format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
