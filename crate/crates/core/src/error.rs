use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {actual}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error(
        "parameter layout does not match model spec: expected {expected} values, got {actual}"
    )]
    LayoutMismatch { expected: usize, actual: usize },

    #[error("non-finite input value at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },

    #[error("non-finite intermediate value in layer {layer}")]
    NonFiniteIntermediate { layer: usize },

    #[error("non-finite gradient entry at environment {env}, parameter {param}")]
    NonFiniteGradient { env: usize, param: usize },

    #[error("non-finite update at parameter {param}")]
    NonFiniteUpdate { param: usize },

    #[error("length mismatch: {what} has length {actual}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("at least {required} environments are required, got {actual}")]
    TooFewEnvironments { required: usize, actual: usize },

    #[error("unknown environment id {0}")]
    UnknownEnvironment(usize),

    #[error("environment {env} is too small to stratify: class {class} has {count} samples")]
    EnvironmentTooSmall {
        env: usize,
        class: usize,
        count: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),

    #[error("unknown sweep kind '{0}'")]
    UnknownSweepKind(String),

    #[error("no records to select from")]
    EmptyRecords,

    #[error("n_env = {0} would overflow the orthant count")]
    OrthantOverflow(u32),

    #[error("eigenvalue {value} at environment {env}, coordinate {coord} is not positive")]
    NonPositiveEigenvalue {
        env: usize,
        coord: usize,
        value: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
