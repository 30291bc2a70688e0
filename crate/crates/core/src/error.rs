use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the zero-norm tolerance")]
    ZeroNorm { norm: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("cosine similarity {cosine} lies inside the arccos clamp region")]
    ClampRegion { cosine: f64 },

    #[error("contrastive batch is empty")]
    EmptyBatch,

    #[error("metric input is empty")]
    EmptyInput,

    #[error("token `{0}` is not in the vocabulary or lexicon")]
    UnknownToken(String),

    #[error("caption contains no motion verb")]
    NoVerb,

    #[error("scene generation exhausted {attempts} rejection attempts")]
    GenerationExhausted { attempts: usize },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
