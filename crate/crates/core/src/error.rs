use thiserror::Error;

/// Errors raised by the numerical kernels and the federated simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("client {client} has no peers to build a consensus from")]
    InsufficientPeers { client: usize },

    #[error("cannot split {labels} labels into {clusters} clusters")]
    InvalidClusterCount { clusters: usize, labels: usize },

    #[error("stepsize {eta} exceeds the stability limit {limit}")]
    StepSize { eta: f64, limit: f64 },

    #[error("matrix has mass outside the block-diagonal support at ({row}, {col})")]
    SupportViolation { row: usize, col: usize },

    #[error("average precision is undefined without positive labels")]
    NoPositives,

    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("local training diverged on client {client} in round {round}")]
    Divergence { client: usize, round: usize },

    #[error("client {client} has no positive labels after {attempts} attempts")]
    DegenerateClient { client: usize, attempts: usize },

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl ToString, found: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub(crate) fn check_square(name: &str, rows: usize, cols: usize, n: usize) -> Result<()> {
    if rows != n || cols != n {
        return Err(shape_err(format!("{name} {n}x{n}"), format!("{rows}x{cols}")));
    }
    Ok(())
}
