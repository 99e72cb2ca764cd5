use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("cell budget exceeded: {requested} cells requested, budget is {budget}")]
    Budget { requested: usize, budget: usize },

    /// A sweep produced a non-finite value.
    #[error("numerical overflow: {0}")]
    Overflow(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Too few samples for the requested estimator.
    #[error("insufficient samples: {0}")]
    Samples(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Config(_) | Error::Samples(_) => 2,
            Error::Budget { .. } | Error::Overflow(_) => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 1,
        }
    }
}
