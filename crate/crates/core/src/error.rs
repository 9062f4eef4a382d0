use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("not a distribution: {0}")]
    InvalidDistribution(String),

    #[error("component {0} is zero; latent coordinates need strictly positive prevalences")]
    ZeroComponent(usize),

    #[error("prior has a zero at class {0}")]
    ZeroPrior(usize),

    #[error("unsupported jaggedness order {0} (expected 0, 1 or 2)")]
    UnsupportedOrder(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("class {0} is absent from the labeled data")]
    MissingClass(usize),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("feature {0} is constant over the training data")]
    DegenerateFeature(usize),

    #[error("class {class} has {count} members, fewer than the {folds} folds requested")]
    TooFewPerClass {
        class: usize,
        count: usize,
        folds: usize,
    },

    #[error("only {0} nonzero paired differences; at least 10 are needed")]
    TooFewPairs(usize),

    #[error("empty score series")]
    Empty,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no feasible prevalence vector after {0} consecutive rejections")]
    Unsatisfiable(usize),

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
