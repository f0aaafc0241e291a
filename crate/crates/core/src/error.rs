use std::path::PathBuf;

use mint_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {what} at {location}: {detail}")]
    Format {
        what: String,
        location: String,
        detail: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("coverage error: AAD missing for {} sample(s): {}", missing.len(), preview(missing))]
    Coverage { missing: Vec<u64> },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn preview(ids: &[u64]) -> String {
    let head: Vec<String> = ids.iter().take(8).map(|i| i.to_string()).collect();
    if ids.len() > 8 {
        format!("{}, ...", head.join(", "))
    } else {
        head.join(", ")
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 config, 3 data/provenance, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Capacity(_)
            | Error::Label(_)
            | Error::Provenance(_)
            | Error::Coverage { .. }
            | Error::Protocol(_) => 3,
            Error::Tensor(TensorError::Parameter { .. }) => 2,
            Error::Tensor(_) | Error::Stage { .. } => 4,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
