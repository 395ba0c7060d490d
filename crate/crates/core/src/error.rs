use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("integer overflow while computing {0}")]
    Overflow(&'static str),

    #[error("composed data-to-noise ratio is singular (monomial noise vanishes)")]
    SingularDnr,

    #[error("suppressor condition violated: |rho| = {rho_abs} < bound * |kappa| = {required}")]
    ConditionViolated { rho_abs: f64, required: f64 },

    #[error("layer plan inconsistent: {0}")]
    PlanInconsistent(String),

    #[error("knowledge not representable: {0}")]
    KnowledgeUnrepresentable(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch} (weights restored to last finite epoch)")]
    Divergence { epoch: usize },

    #[error("rollout horizon {horizon} exceeds trajectory length {available}")]
    HorizonTooLong { horizon: usize, available: usize },

    #[error("model is not a quadratic polynomial: {0}")]
    ModelNotPolynomial(String),

    #[error("quadratic cannot be revised: {0}")]
    Unrevisable(String),

    #[error("no real correction exists: {0}")]
    NoRealSolution(String),

    #[error("degenerate quadratic system: {0}")]
    DegenerateQuadratic(String),

    #[error("unsupported command dimension {0}; only 2 is supported")]
    UnsupportedDimension(usize),

    #[error("simulation blew up at step {step}")]
    BlowUp { step: usize },

    #[error("parse error at line {line}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        line: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("config hash mismatch: file has {found}, model config hashes to {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("unknown format version {0:?}")]
    VersionUnknown(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, column: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    /// An I/O error with the offending path prefixed to its message.
    pub(crate) fn file(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
    }

    /// Process exit code for the CLI: 3 for data problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::PlanInconsistent(_) | Error::UnsupportedDimension(_) => 2,
            Error::DimensionMismatch { .. }
            | Error::Parse { .. }
            | Error::HashMismatch { .. }
            | Error::VersionUnknown(_)
            | Error::KnowledgeUnrepresentable(_)
            | Error::ShapeMismatch(_)
            | Error::HorizonTooLong { .. }
            | Error::Io(_) => 3,
            _ => 4,
        }
    }
}
