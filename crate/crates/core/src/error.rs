use seld_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("undefined metrics: {0}")]
    Undefined(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// True for errors caused by an invalid configuration rather than by data.
    pub fn is_config(&self) -> bool {
        matches!(self, CoreError::Config(_) | CoreError::Tensor(TensorError::Indivisible { .. }))
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, CoreError::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
