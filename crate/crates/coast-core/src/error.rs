use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoastError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("target is not one-hot at pixel {pixel}")]
    NotOneHot { pixel: usize },
    #[error("distribution not normalized at pixel {pixel} (sum {sum})")]
    NotNormalized { pixel: usize, sum: f64 },
    #[error("unknown classifier head: {0}")]
    UnknownHead(String),
    #[error("invalid domain index {0}")]
    InvalidDomain(usize),
    #[error("duplicate domain id `{0}`")]
    DuplicateDomain(String),
    #[error("palette supports at most {max} classes, requested {requested}")]
    PaletteExceeded { requested: usize, max: usize },
    #[error("class id {class} out of range for {k} classes")]
    ClassOutOfRange { class: usize, k: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoastError>;
