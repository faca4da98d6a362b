use thiserror::Error;

/// Errors raised while building, fitting, or scoring a model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("grouping factor `{factor}` is rank deficient: {reason}")]
    Rank { factor: String, reason: String },
    #[error("model not identifiable: {0}")]
    Identifiability(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("score undefined: {0}")]
    ScoreUndefined(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error("study failed: {0}")]
    Study(String),
}

pub type Result<T> = std::result::Result<T, Error>;
