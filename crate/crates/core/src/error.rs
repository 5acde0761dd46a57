use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("codebook validation failed: {0}")]
    Validation(String),

    #[error("unsupported codebook extension: {0}")]
    UnsupportedExtension(String),

    #[error("symbol index {symbol} out of range for alphabet of size {alphabet}")]
    InvalidSymbol { symbol: usize, alphabet: usize },

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("factor graph structure error: {0}")]
    Structure(String),

    #[error(
        "observation node {node} has degree {degree}, above the enumeration cap of {cap}; \
         reduce the path count or the grid size"
    )]
    ComplexityCap { node: usize, degree: usize, cap: usize },

    #[error("oracle budget exceeded: {required} enumerations required, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (configuration, files,
    /// codebooks) as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::ComplexityCap { .. })
    }
}
