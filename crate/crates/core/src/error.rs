use thiserror::Error;

/// Errors raised by measure, kernel and learning operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),

    #[error("space must contain at least one point")]
    EmptySpace,

    #[error("coordinates: {0}")]
    Coords(String),

    #[error("expected {expected} weights, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("weight {index} is not finite")]
    NonFinite { index: usize },

    #[error("weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },

    #[error("weights sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty data")]
    EmptyData,

    #[error("{0} is not a product space")]
    NotProduct(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel `{kernel}` needs coordinates on the space")]
    MissingCoords { kernel: String },

    #[error("gram matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("squared discrepancy {0:e} is negative beyond tolerance; gram matrix is not PSD")]
    NegativeRadicand(f64),

    #[error("conditional undefined at massless source points: {}", .0.join(", "))]
    MasslessPoints(Vec<String>),

    #[error("source gram matrix is singular on the sum-zero subspace (min eigenvalue {0:e})")]
    SingularSourceGram(f64),

    #[error("lipschitz constant is infinite: points `{0}` and `{1}` share coordinates but have different rows")]
    InfiniteLipschitz(String, String),

    #[error("duplicate interpolation abscissa {0}")]
    DuplicateAbscissa(f64),

    #[error("{0} interpolation nodes exceed the limit of {max}; split the node set", max = crate::learning::MAX_INTERPOLATION_NODES)]
    TooManyNodes(usize),

    #[error("optimizer diverged at iteration {iteration} (objective {objective}); trace tail: {trace:?}")]
    Divergence {
        iteration: usize,
        objective: f64,
        trace: Vec<f64>,
    },

    #[error("json: {0}")]
    Json(String),
}

impl Error {
    pub(crate) fn in_row(self, row: usize) -> Self {
        Error::Row {
            row,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
