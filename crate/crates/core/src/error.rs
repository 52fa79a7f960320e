use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("degenerate norm: {which}[{index}] diagonal entry is {value}")]
    DegenerateNorm {
        which: &'static str,
        index: usize,
        value: f64,
    },

    #[error("cosine similarity rho[{k}][{n}] = {value} lies outside [-1, 1]")]
    RhoOutOfRange { k: usize, n: usize, value: f64 },

    #[error("invalid variant: {0}")]
    InvalidVariant(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("covariance is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("integral {kind} at {context}: {source}")]
    Integral {
        kind: &'static str,
        context: String,
        #[source]
        source: Box<LabError>,
    },

    #[error("factorization failed after jitter: {0}")]
    Factorization(String),

    #[error("adaptive step underflow at alpha = {alpha} (step {step})")]
    StepUnderflow { alpha: f64, step: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code class: 2 for bad input, 3 for numeric failure, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::InvalidVariant(_)
            | LabError::InvalidConfig { .. }
            | LabError::Shape(_)
            | LabError::NotPsd(_)
            | LabError::IndexOutOfRange { .. }
            | LabError::Json(_) => 2,
            LabError::DegenerateNorm { .. }
            | LabError::RhoOutOfRange { .. }
            | LabError::Integral { .. }
            | LabError::Factorization(_)
            | LabError::StepUnderflow { .. } => 3,
            LabError::Io(_) => 1,
        }
    }
}
