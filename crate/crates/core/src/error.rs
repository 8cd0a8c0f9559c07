use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A cell of the panel is missing.
    #[error("missing value for subject `{subject}` at time {time}: {column}")]
    MissingCell {
        subject: String,
        time: i64,
        column: String,
    },

    /// Invalid configuration or model specification.
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A regression design or moment system does not have full rank.
    #[error("rank deficiency: {0}")]
    Rank(String),

    /// Logistic fit diverged because a column separates the response.
    #[error("perfect separation in treatment model at time {time}, column `{column}`")]
    Separation { time: usize, column: String },

    /// Iterative solver gave up.
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// Multi-start search found more than one root.
    #[error("estimating equations have multiple roots: {0}")]
    MultipleRoots(String),

    #[error("numerical overflow: {0}")]
    Overflow(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Empty subgroup, cohort, or at-risk set.
    #[error("empty selection: {0}")]
    Empty(String),

    /// Error inside one cross-fit fold.
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    /// Too many bootstrap replicates failed.
    #[error("bootstrap failed: {failed} of {total} replicates ({taxonomy})")]
    Bootstrap {
        failed: usize,
        total: usize,
        taxonomy: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short category label, used for failure taxonomies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(_) | Error::MissingCell { .. } => "data",
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Rank(_) => "rank",
            Error::Separation { .. } => "separation",
            Error::NonConvergence { .. } => "non-convergence",
            Error::MultipleRoots(_) => "multiple-roots",
            Error::Overflow(_) => "overflow",
            Error::Unsupported(_) => "unsupported",
            Error::Empty(_) => "empty",
            Error::Fold { source, .. } => source.kind(),
            Error::Bootstrap { .. } => "bootstrap",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
