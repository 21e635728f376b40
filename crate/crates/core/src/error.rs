use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AvexError {
    #[error("scene {h}x{w} is smaller than the minimum field of view {d_min}")]
    SceneTooSmall { h: usize, w: usize, d_min: usize },
    #[error("invalid camera config: {0}")]
    BadCameraConfig(String),
    #[error("episode already finished; reset before stepping")]
    EpisodeFinished,
    #[error("stop threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("class probabilities sum to {0}, expected 1")]
    BadProbabilities(f64),
    #[error("attention matrix is not row-stochastic (row {row} sums to {sum})")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("state component lengths differ: {0}")]
    StateMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("checkpoint config mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint file error: {0}")]
    TensorFile(#[from] avex_nn::serialize::TensorFileError),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, AvexError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AvexError {
    let path = path.into();
    move |source| AvexError::Io { path, source }
}
