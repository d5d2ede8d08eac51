use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("differentiation target is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("differentiation target is not reachable from the output")]
    Unreachable,
    #[error("tensor does not require grad")]
    GradDisabled,
    #[error("unknown architecture preset `{0}`")]
    UnknownPreset(String),
    #[error("incompatible shape: {0}")]
    IncompatibleShape(String),
    #[error("model has no logit layer")]
    NoLogitLayer,
    #[error("both probability masses are zero")]
    BothZero,
    #[error("wrong transform kind: expected {expected}, got {found}")]
    WrongKind { expected: &'static str, found: String },
    #[error("transform has an unresolved random offset")]
    Unresolved,
    #[error("alignment gradient vanishes (norm {0:e})")]
    ZeroGradient(f64),
    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("unknown dataset generator `{0}`")]
    UnknownGenerator(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("teacher parameters changed during the matching phase")]
    TeacherMutated,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable tag used on the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteValue(_) => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::Unreachable => "unreachable",
            Error::GradDisabled => "grad_disabled",
            Error::UnknownPreset(_) => "unknown_preset",
            Error::IncompatibleShape(_) => "incompatible_shape",
            Error::NoLogitLayer => "no_logit_layer",
            Error::BothZero => "both_zero",
            Error::WrongKind { .. } => "wrong_kind",
            Error::Unresolved => "unresolved",
            Error::ZeroGradient(_) => "zero_gradient",
            Error::BadMagic { .. } => "bad_magic",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Truncated(_) => "truncated",
            Error::UnknownGenerator(_) => "unknown_generator",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::TeacherMutated => "teacher_mutated",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io(_) => "io",
        }
    }
}
