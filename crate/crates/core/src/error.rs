use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("map too small for spatial differences: {height}x{width} (need at least 2x2)")]
    TooSmall { height: usize, width: usize },

    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),

    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),

    #[error("cluster count must be at least 1, got {0}")]
    InvalidQPrime(usize),

    #[error("silhouette needs at least two clusters")]
    SingleCluster,

    #[error("non-finite loss at iteration {iter}: sim={sim}, con={con}, mu={mu}")]
    NonFiniteLoss {
        iter: usize,
        sim: f64,
        con: f64,
        mu: f64,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("no pixels to evaluate")]
    EmptyEval,

    #[error("no ground truth for {0}")]
    NoGroundTruth(String),

    #[error("dataset root missing: {}", .0.display())]
    MissingRoot(PathBuf),

    #[error("corrupt dataset layout: {0}")]
    CorruptLayout(String),

    #[error("failed to decode {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn decode(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Decode {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
