use std::path::PathBuf;

use medflip_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },
    #[error("evaluation protocol: {0}")]
    Protocol(String),
    #[error("non-finite {what} at step {step} (batch seed {batch_seed:#018x})")]
    NonFinite {
        what: String,
        step: usize,
        batch_seed: u64,
    },
    #[error("output: {0}")]
    Output(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |e| Error::Io(path, e)
    }

    /// Whether the failure came from the file system rather than the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(..))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Output(e.to_string())
    }
}
