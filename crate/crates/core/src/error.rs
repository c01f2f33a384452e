use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible amplitude at indices {indices:?} (|t| > 1)")]
    InfeasibleAmplitude { indices: Vec<usize> },

    #[error("singular channel: {0}")]
    SingularChannel(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("target BER {target:e} never reached on the curve")]
    UnreachableTarget { target: f64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
