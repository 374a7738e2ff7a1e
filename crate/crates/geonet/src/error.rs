use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate triangle {element} (area {area:e})")]
    DegenerateTriangle { element: usize, area: f64 },

    #[error("invalid element id {0}")]
    InvalidElement(usize),

    #[error("anisotropy field h{field} = {value:e} at node {node} outside [{lo:e}, {hi:e}]")]
    ClampViolation {
        field: usize,
        node: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("dense covariance requested for {n} nodes (limit {limit})")]
    TooLargeForDense { n: usize, limit: usize },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("all candidate intensities are zero")]
    DegenerateIntensity,

    #[error("could not select {requested} distinct neurons ({selected} found before the re-draw stream ran out)")]
    DistinctExhausted { requested: usize, selected: usize },

    #[error("unreachable node pair ({0}, {1})")]
    Unreachable(usize, usize),

    #[error("neuron {0} has zero bandwidth (coincident neurons)")]
    ZeroBandwidth(usize),

    #[error("latent field has zero variance at every neuron")]
    DegenerateField,

    #[error("graph is disconnected")]
    Disconnected,

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("every trial grid node was penalized")]
    SearchFailed,

    #[error("insufficient history: need more than {needed} entries, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error("version mismatch: file has {found}, expected {expected}")]
    Version { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
