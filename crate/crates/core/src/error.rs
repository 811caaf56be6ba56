use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("site {site} is not covered by any basis function")]
    Coverage { site: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rejection sampler exhausted after {tries} proposals (estimated acceptance rate {acceptance_rate:.3e})")]
    SamplerExhausted { tries: u64, acceptance_rate: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("pair ({i}, {j}) does not fall under the requested dependence case: {reason}")]
    Case { i: usize, j: usize, reason: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("no site pairs found at distance {h} (tolerance {tol})")]
    EmptyPairs { h: f64, tol: f64 },

    #[error("index {index} out of range (size {len})")]
    Index { index: usize, len: usize },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("binning error: {0}")]
    Binning(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::SamplerExhausted { .. } | Error::Fit(_)
        )
    }
}
