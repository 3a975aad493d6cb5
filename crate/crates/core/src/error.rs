use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("degenerate class: {0}")]
    DegenerateClass(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("sampling error: need {per_class} per class, have {{c0: {c0}, c1: {c1}}}")]
    Sampling {
        per_class: usize,
        c0: usize,
        c1: usize,
    },
    #[error("range error: {0}")]
    Range(String),
    #[error("pair {index}: {source}")]
    AtPair {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_pair(index: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtPair {
            index,
            source: Box::new(source),
        }
    }

    /// Strips any [`Error::AtPair`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtPair { source, .. } => source.root(),
            other => other,
        }
    }
}
