use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate spectrum: gap {gap:e} between levels {lower} and {upper} is within tolerance {gap_tol:e}")]
    DegenerateSpectrum {
        lower: usize,
        upper: usize,
        gap: f64,
        gap_tol: f64,
    },

    #[error("{what} not Hermitian (max deviation {deviation:e})")]
    NotHermitian { what: String, deviation: f64 },

    #[error("{what} not anti-Hermitian (max deviation {deviation:e})")]
    NotAntiHermitian { what: String, deviation: f64 },

    #[error("frame mismatch in column {column}: overlap magnitude {overlap:.3e} < 0.5")]
    FrameMismatch { column: usize, overlap: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step size underflow at t = {t}: step {step:e} below minimum")]
    StepSizeUnderflow { t: f64, step: f64 },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("window {window} wider than half the series span {span}")]
    WindowTooWide { window: f64, span: f64 },

    #[error("window {window} covers fewer than {min_samples} samples")]
    WindowTooNarrow { window: f64, min_samples: usize },

    #[error("support violation: q[{index}] > 0 but p[{index}] = 0")]
    SupportViolation { index: usize },

    #[error("simplex violation at tau = {tau}: {detail}")]
    SimplexViolation { tau: f64, detail: String },

    #[error("trace drift {drift:e} at tau = {tau}")]
    TraceDrift { tau: f64, drift: f64 },

    #[error("at sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("missing required field `{0}`")]
    Schema(String),

    #[error("{0}")]
    Value(String),
}

impl Error {
    pub(crate) fn at_sample(self, index: usize) -> Error {
        Error::AtSample {
            index,
            source: Box::new(self),
        }
    }

    /// Innermost error, with sample wrappers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtSample { source, .. } => source.root(),
            other => other,
        }
    }
}
