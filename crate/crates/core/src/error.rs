use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A class has no pixels left after the mask was brought to feature resolution.
    #[error("empty mask for class {class_id}")]
    EmptyMask { class_id: u8 },

    #[error("numerical failure{}: {reason}", .iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numerical { iteration: Option<usize>, reason: String },

    #[error("data error ({id}): {reason}")]
    Data { id: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            id: id.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(reason: impl Into<String>) -> Self {
        Error::Numerical {
            iteration: None,
            reason: reason.into(),
        }
    }
}
