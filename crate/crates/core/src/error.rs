use thiserror::Error;

use crate::model::ModuleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("row {row} of causal softmax has every position masked")]
    FullyMasked { row: usize },

    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("kv cache does not match the model: {0}")]
    CacheMismatch(String),

    #[error("invalid quantization spec: {0}")]
    QuantSpec(String),

    #[error("quantization scale must be positive, got {0}")]
    NonPositiveScale(f32),

    #[error("static activation scale missing for {0}")]
    MissingStaticScale(ModuleId),

    #[error("module {0} not present in calibration report")]
    MissingModule(ModuleId),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("median of scales is zero; max-median ratio undefined")]
    ZeroMedian,

    #[error("QFeP inapplicable: {reason}")]
    PrefixInapplicable { reason: String, best_ratio: Option<f64> },

    #[error("sequence of {len} tokens plus prefix of {prefix} exceeds capacity {capacity}")]
    Capacity { len: usize, prefix: usize, capacity: usize },

    #[error("{artifact} was made for model {expected} but this model is {found}")]
    FingerprintMismatch {
        artifact: &'static str,
        expected: String,
        found: String,
    },

    #[error("spike generator failed: {0}")]
    Generator(String),

    #[error("model container: {0}")]
    Format(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Fails unless `expected` (recorded in an artifact) matches `found`.
    pub fn check_fingerprint(artifact: &'static str, expected: &str, found: &str) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch {
                artifact,
                expected: expected.to_string(),
                found: found.to_string(),
            })
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
