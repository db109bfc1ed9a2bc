use thiserror::Error;

/// Errors raised anywhere in the search, training and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pooling kernel must be odd, got {0}")]
    EvenKernel(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0}")]
    NonScalarLoss(String),
    #[error("loss variable does not belong to this tape")]
    DetachedLoss,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("expected {expected} edges, got {got}")]
    EdgeCountMismatch { expected: usize, got: usize },
    #[error("genotype does not match module: {0}")]
    GenotypeMismatch(String),
    #[error("architecture parameters contain non-finite values")]
    NonFiniteAlpha,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("output position {0:?} is out of bounds")]
    OutOfBoundsPosition((usize, usize, usize)),
    #[error("map has zero total mass")]
    ZeroMass,
    #[error("truncated record: {0} trailing bytes")]
    TruncatedRecord(usize),
    #[error("label {0} out of range")]
    LabelOutOfRange(u8),
    #[error("unsupported class count {0} (expected 2..=8)")]
    UnsupportedClassCount(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
