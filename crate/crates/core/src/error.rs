use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A required column is absent from a track file or its mapping.
    #[error("schema error: missing column `{column}`")]
    Schema { column: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("balance error: class `{class}` has no samples")]
    Balance { class: String },

    /// Non-finite loss during training.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(what: &str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Input(format!(
            "{what}: expected shape {expected:?}, got {actual:?}"
        ))
    }
}

impl Error {
    /// Process exit status: 1 usage, config or internal; 2 data; 3 training
    /// divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Internal(_) => 1,
            Error::Training { .. } => 3,
            Error::Schema { .. }
            | Error::Data(_)
            | Error::Input(_)
            | Error::Labeling(_)
            | Error::Balance { .. }
            | Error::Decode(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 2,
        }
    }
}
