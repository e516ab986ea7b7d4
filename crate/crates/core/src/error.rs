use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing conditioning: {0}")]
    MissingConditioning(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid adapter spec: {0}")]
    Spec(String),
    #[error("incompatible snapshot: {0}")]
    IncompatibleSnapshot(String),
    #[error("snapshot corrupted: expected checksum {expected}, found {found}")]
    Corruption { expected: String, found: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("cannot aggregate reports: {0}")]
    Aggregation(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch} (lr {lr:e}): {detail}")]
    Divergence { epoch: usize, lr: f64, detail: String },
    #[error("parameters are frozen: {0}")]
    Frozen(String),
    #[error("pretraining error: {0}")]
    Pretrain(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
