use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    /// A `.bvt` stream failed to parse; `field` names the offending part.
    #[error("parse error: {field}: {detail}")]
    Parse { field: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse {
            field,
            detail: detail.into(),
        }
    }
}
