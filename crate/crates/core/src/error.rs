use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("channel count {0} is not a perfect square")]
    NotSquare(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("cost matrix is empty")]
    EmptyMatrix,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate box: enclosing hull has zero area")]
    DegenerateBox,

    #[error("timestep {0} is not in the noise schedule")]
    UnknownTimestep(u32),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("sequence has {len} frames, need at least {need}")]
    SequenceTooShort { len: usize, need: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: expected {expected:08x}, computed {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
