use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate range: all values equal {0}")]
    DegenerateRange(f64),
    #[error("{distinct} distinct values cannot fill {bins} equal-frequency bins")]
    TooFewDistinct { distinct: usize, bins: usize },
    #[error("non-finite value {0}")]
    NonFiniteValue(f64),
    #[error("task `{0}` has no examples in any class")]
    AllEmptyTask(String),
    #[error("location ({row}, {col}) outside a {size}x{size} grid")]
    OutOfGrid { row: i64, col: i64, size: usize },
    #[error("around-labels sampling needs at least one label site")]
    EmptyLabelSites,
    #[error("cannot honour separation {0} between splits")]
    InfeasibleSeparation(f64),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("generator stages cannot reach output shape: {0}")]
    ShapeInfeasible(String),
    #[error("bad channel count: {0}")]
    BadChannelCount(String),
    #[error("non-finite input gradient in gradient penalty")]
    NonFiniteGradient,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite logit")]
    NonFiniteLogit,
    #[error(
        "non-finite loss at epoch {epoch}, step {step}; diagnostic checkpoint at {checkpoint}"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        checkpoint: PathBuf,
    },
    #[error("checkpoint config conflicts with run config: {0}")]
    ResumeMismatch(String),
    #[error("singular system: design matrix is rank-deficient and penalty is zero")]
    SingularSystem,
    #[error("fold too small: {0}")]
    FoldTooSmall(String),
    #[error("zero variance input")]
    ZeroVariance,
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
