use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input shapes incompatible with an op; names the op kind and the dims.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: String, detail: String },

    #[error("unknown {what}: `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("node id {id} is not on the tape (len {len})")]
    DanglingNode { id: usize, len: usize },

    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("training diverged at {phase} level {level} step {step}: {terms}")]
    Divergence {
        phase: &'static str,
        level: usize,
        step: usize,
        terms: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }
}
