use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A malformed cell in an input file. `line` is 1-based and counts the header.
    #[error("{file}:{line}: column `{column}`: {message}")]
    Parse {
        file: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("{file}: schema error: {message}")]
    Schema { file: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("student `{0}` has assessments but no tutor mapping")]
    MissingTutor(String),

    #[error("impurity is undefined for an empty node")]
    EmptyCounts,

    #[error("invalid split: one side is empty")]
    EmptySplit,

    #[error("both classes are required (high: {n_high}, low: {n_low})")]
    SingleClass { n_high: usize, n_low: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("R² must be below 1, got {0}")]
    R2OutOfRange(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("feature {0} is NaN")]
    NanFeature(usize),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    #[error("degenerate labels: {0}")]
    Degenerate(String),

    #[error("outcomes have zero variance; R² is undefined")]
    ZeroVariance,

    #[error("need at least 5 tutors to build folds, got {0}")]
    TooFewTutors(usize),

    #[error("fold {fold}: {message}")]
    Fold { fold: usize, message: String },

    #[error("infeasible cohort spec: {0}")]
    InfeasibleSpec(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
