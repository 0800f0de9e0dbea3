use thiserror::Error;

use crate::autodiff::NetworkParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Quadrature failed its node-doubling self check.
    #[error("quadrature not converged: refinement moved log evidence by {delta:.3e} nats")]
    Accuracy { delta: f64 },

    #[error("simulator for model {model_index} failed: {source}")]
    Simulation {
        model_index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Training hit a non-finite loss; `last_good` holds the parameters of the
    /// last checkpoint taken before the failure.
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64, last_good: Box<NetworkParams> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
