use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output node, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("finite-difference probe produced a non-finite value")]
    NonFiniteProbe,

    #[error("rank {rank} must be smaller than min({d_out}, {d_in})")]
    RankTooLarge { rank: usize, d_out: usize, d_in: usize },

    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndexOutOfRange { index: usize, layers: usize },

    #[error("anchors nearly coincide: |t_pos - t_neg| = {dist:.3e} <= {eps:.3e}")]
    AnchorsTooClose { dist: f64, eps: f64 },

    #[error("degenerate displacement: |v_out - v_in| = {norm:.3e} <= {eps:.3e}")]
    DegenerateDisplacement { norm: f64, eps: f64 },

    #[error("every sample in the batch ({count}) has a degenerate displacement")]
    AllDegenerate { count: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("gradient vectors disagree in length: {left} vs {right}")]
    GradientLengthMismatch { left: usize, right: usize },

    #[error("selection count k={k} out of range 1..={max}")]
    SelectionOutOfRange { k: usize, max: usize },

    #[error("operation requires phase {expected}, state is in {actual}")]
    WrongPhase { expected: &'static str, actual: &'static str },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("pretraining stalled: loss {loss:.3e} above threshold {threshold:.3e} after {steps} steps")]
    PretrainStalled { loss: f64, threshold: f64, steps: usize },

    #[error("subset enumeration too large: C({layers},{k}) = {count} exceeds bound {bound}")]
    OracleIntractable { layers: usize, k: usize, count: usize, bound: usize },

    #[error("selection {selection:?} was not scored by the oracle")]
    SelectionNotScored { selection: Vec<usize> },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
