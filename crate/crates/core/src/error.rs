use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate domain: all locations coincide on both axes")]
    DegenerateDomain,

    #[error("duplicate location at indices {first} and {second}")]
    DuplicateLocation { first: usize, second: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("parameter {name} = {value} outside the surrogate training envelope [{lo}, {hi}]")]
    OutOfEnvelope {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("flat field: empirical variogram has zero variance")]
    FlatField,

    #[error("model bank format error: {0}")]
    BankFormat(String),

    #[error("model bank checksum mismatch")]
    Checksum,

    #[error("model bank conditioning-set size is {found}, requested {requested}")]
    BankMismatch { found: usize, requested: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
