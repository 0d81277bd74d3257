use thiserror::Error;

/// Errors produced anywhere in the femnet pipeline.
#[derive(Debug, Error)]
pub enum FenError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate cell {cell}: area {area:e}")]
    DegenerateCell { cell: usize, area: f64 },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("sliver filtering removed every cell")]
    EmptyMesh,
    #[error("node {0} belongs to no cell")]
    IsolatedNode(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteOutput(String),
    #[error("no recorded graph: {0}")]
    GraphNotRecorded(String),
    #[error("model has no transport term")]
    TransportAbsent,
    #[error("solver exceeded the budget of {max_nfe} function evaluations at t = {t}")]
    MaxNfeExceeded { max_nfe: usize, t: f64 },
    #[error("step size {step:e} underflowed at t = {t}")]
    StepUnderflow { step: f64, t: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("k = {k} exceeds the number of points N = {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("feature {0} has zero variance over the training split")]
    ZeroVariance(usize),
    #[error("training failed at epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<FenError>,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FenError> = std::result::Result<T, E>;
