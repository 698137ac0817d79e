use thiserror::Error;

/// Errors raised by the numerical engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("degenerate curve: tangent vanishes near sample {index}")]
    DegenerateCurve { index: usize },

    #[error("hamiltonian drift {drift:.3e} exceeds tolerance {tol:.3e}; increase the step count")]
    IntegrationAccuracy { drift: f64, tol: f64 },

    #[error("shooting blew up at step {step}")]
    BlowUp { step: usize },

    #[error("reparameterisation is not a diffeomorphism at sample {index}")]
    NonDiffeomorphism { index: usize },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("malformed {file}: field `{field}`: {reason}")]
    Schema {
        file: String,
        field: String,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn schema(file: impl Into<String>, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the forward model (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateCurve { .. }
                | Error::IntegrationAccuracy { .. }
                | Error::BlowUp { .. }
                | Error::NonDiffeomorphism { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
