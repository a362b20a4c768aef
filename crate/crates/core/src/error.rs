use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid parameters or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (non-finite values, out-of-range labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor or record shapes that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Synthetic scene generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Internal bookkeeping disagrees with itself.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    /// A file parsed badly at a known position.
    #[error("{}: malformed at byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
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

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (scenes {scenes:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        scenes: Vec<String>,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
