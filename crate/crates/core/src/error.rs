use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("cosine similarity undefined: zero-norm {what} at index {index}")]
    DegenerateNorm { what: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown token `{0}` in prompt")]
    UnknownToken(String),

    #[error("label {label} exceeds the number of region classes {classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("mis-sampled batch: {0}")]
    Batch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("corrupt container: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch} step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("missing state: {0}")]
    Missing(String),
}
