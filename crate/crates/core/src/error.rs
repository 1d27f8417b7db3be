use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },

    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("variable {index} is not recorded on this graph (tape length {len})")]
    NotOnTape { index: usize, len: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("class {class} out of range for {k} classes")]
    ClassOutOfRange { class: usize, k: usize },

    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{0}: input is empty")]
    Empty(&'static str),

    #[error("quadratic weighted kappa is undefined: {0}")]
    KappaUndefined(&'static str),

    #[error("input is not a probability vector (sum {sum})")]
    NotProbability { sum: f64 },

    #[error("class {class} has {count} samples; stratified split needs at least 2")]
    ClassTooSmall { class: usize, count: usize },

    #[error("mode {mode} is inconsistent with the provided inputs: {reason}")]
    ModeMismatch { mode: String, reason: String },

    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("gradient check failed for `{param}`[{index}]: analytic {analytic:e}, numeric {numeric:e}, rel. err {rel_err:e}")]
    GradCheck {
        param: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from user configuration rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidConfig { .. } | Error::Json(_))
    }
}
