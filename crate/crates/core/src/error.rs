use thiserror::Error;

/// Errors raised by the dense linear algebra layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("SVD did not converge within {0} sweeps")]
    SvdNoConvergence(usize),
    #[error("rank-deficient input: smallest singular value {smallest:e} below {threshold:e}")]
    RankDeficient { smallest: f64, threshold: f64 },
    #[error("singular linear system")]
    SingularSystem,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite entry encountered in {0}")]
    NonFinite(String),
}

/// Errors raised by the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("input `{0}` not bound before forward")]
    UnboundInput(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("loss node must be a 1x1 scalar, got {0}x{1}")]
    NonScalarLoss(usize, usize),
}

/// Errors raised by adapter construction, forward/backward and merging.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("delta weight is not materializable for variant `{0}`")]
    NotMaterializable(String),
    #[error("adapter already merged")]
    AlreadyMerged,
    #[error("adapter is not merged")]
    NotMerged,
    #[error("forward on merged state; unmerge first")]
    ForwardWhileMerged,
    #[error("variant `{variant}` does not support `{what}`")]
    Unsupported { variant: String, what: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{0}")]
    Invalid(String),
}
