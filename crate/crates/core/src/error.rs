use thiserror::Error;

/// Errors raised by the numerical pipeline.
///
/// Each variant maps to a distinct process exit code in the CLI (see
/// [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("covariance factorization failed at leading minor {minor} (jitter {jitter:e})")]
    NumericDegeneracy { minor: usize, jitter: f64 },

    #[error("numerical blow-up at step {step}: state = {value}")]
    NumericalBlowup { step: usize, value: f64 },

    #[error("degenerate sample on path {path}: |{quantity}| = {value:e} below 1e-10")]
    DegenerateSample {
        path: usize,
        quantity: &'static str,
        value: f64,
    },

    #[error("model hypothesis violated: {0}")]
    ModelViolation(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("regression failure: {0}")]
    RegressionFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 3 hypothesis breach, 4 numerical failure,
    /// 5 config error, 6 regression failure, 1 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ModelViolation(_) => 3,
            Error::Numerical(_)
            | Error::NumericDegeneracy { .. }
            | Error::NumericalBlowup { .. }
            | Error::DegenerateSample { .. }
            | Error::DegenerateData(_) => 4,
            Error::InvalidArgument(_) | Error::Config(_) => 5,
            Error::RegressionFailure(_) => 6,
            Error::Io { .. } => 1,
        }
    }

    /// Short machine-readable kind used in structured error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Numerical(_) => "numerical-error",
            Error::NumericDegeneracy { .. } => "numeric-degeneracy",
            Error::NumericalBlowup { .. } => "numerical-blowup",
            Error::DegenerateSample { .. } => "degenerate-sample",
            Error::ModelViolation(_) => "model-violation",
            Error::DegenerateData(_) => "degenerate-data",
            Error::RegressionFailure(_) => "regression-failure",
            Error::Config(_) => "config-error",
            Error::Io { .. } => "io-error",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
