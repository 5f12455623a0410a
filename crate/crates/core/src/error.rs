use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("softmax column {0} is entirely masked")]
    DegenerateColumn(usize),

    #[error("unregistered primitive `{0}`")]
    UnregisteredPrimitive(String),

    #[error("class {0} has no tokens")]
    EmptyClass(usize),

    #[error("mixture normalization violated: {0}")]
    NormalizationViolated(String),

    #[error("loss diverged at step {step}: {value}")]
    DivergedLoss { step: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for the failures the CLI reports as numerical (exit code 3).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::DivergedLoss { .. }
                | Error::DegenerateColumn(_)
                | Error::NotSymmetric(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}
