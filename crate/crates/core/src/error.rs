use inbn_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<CoreError>,
    },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("{path}: {msg}")]
    Image { path: String, msg: String },

    #[error("box format: {0}")]
    BoxFormat(String),

    #[error("sequence generation: {0}")]
    Generation(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Contract { op, msg: msg.into() }
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        Self::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
