use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("level error: requested level {requested} exceeds available level {available}")]
    Level { requested: u32, available: u32 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("time {0} is not a grid point")]
    NotOnGrid(f64),
    #[error("sewing precondition failed: measured defect slope {slope:.3} is not above {threshold:.3}")]
    SewingPrecondition { slope: f64, threshold: f64 },
    #[error("nilpotency violated: worst commutator norm {0:e}")]
    Nilpotency(f64),
    #[error("order {0} exceeds the combinatorial guard (at most 6)")]
    OrderGuard(usize),
    #[error("requested depth {0} is beyond the available lift data")]
    Depth(usize),
    #[error("numerically singular matrix at t = {0}")]
    Singular(f64),
    #[error("non-finite value encountered at step {0}")]
    NonFinite(usize),
    #[error("regression failure: {0}")]
    Regression(String),
    #[error("expression error: {0}")]
    Expr(String),
    #[error("spike interval [{tau}, {tau}+{eps}] is outside [0, {horizon}]")]
    Spike { tau: f64, eps: f64, horizon: f64 },
    #[error("invalid permutation: {0:?}")]
    Permutation(Vec<usize>),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
