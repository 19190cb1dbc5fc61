use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; `axes` names the offending dimensions.
    #[error("dimension mismatch in {op} ({axes}): {detail}")]
    Dimension {
        op: &'static str,
        axes: String,
        detail: String,
    },

    /// A hyperparameter outside its admissible range.
    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: &'static str, detail: String },

    /// Input data failed validation (NaN, out-of-range label, empty split, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// An API was used outside its contract, such as calling backward on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("failed to load dataset field `{field}`: {detail}")]
    Load { field: String, detail: String },

    #[error("failed to parse genotype at {edge}: {detail}")]
    GenotypeParse { edge: String, detail: String },

    /// The search or training diverged (non-finite loss or estimate).
    #[error("aborted at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axes: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axes: axes.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }

    pub(crate) fn load(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
