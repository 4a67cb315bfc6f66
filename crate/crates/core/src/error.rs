use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },
    #[error("iteration {iter} outside [0, {total})")]
    IterOutOfRange { iter: usize, total: usize },
    #[error("timestep mismatch: {0} vs {1}")]
    TimestepMismatch(usize, usize),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("unknown prompt id `{0}`")]
    UnknownPrompt(String),
    #[error("estimator input `{0}` was not provided")]
    MissingTerm(&'static str),
    #[error("non-finite {what} at iteration {iter} (t = {t})")]
    NonFinite {
        what: &'static str,
        iter: usize,
        t: usize,
    },
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("npy: {0}")]
    Npy(String),
}
