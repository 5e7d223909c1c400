use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("invalid environment: {0}")]
    InvalidEnv(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("payoff is not skew-symmetric at context {x}, actions ({y}, {y2})")]
    NotSkewSymmetric { x: usize, y: usize, y2: usize },

    #[error("zero probability at triple {index} (context {x}, action {y})")]
    ZeroProbability { index: usize, x: usize, y: usize },

    #[error("solver diverged at step {step}: loss {current:e} exceeds 10x initial {initial:e}")]
    Divergence { step: usize, initial: f64, current: f64 },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample budget mismatch: {0}")]
    BudgetMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
