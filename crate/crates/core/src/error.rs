use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("unknown frame `{0}`")]
    UnknownFrame(String),

    #[error("invalid kinematic model: {0}")]
    Model(String),

    #[error("gimbal lock: middle angle {angle} is within 1e-6 of ±π/2")]
    GimbalLock { angle: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid gait parameters: {0}")]
    GaitParams(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient at optimizer step {step} in parameter `{param}`")]
    NonFiniteGradient { step: u64, param: String },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_good: Option<Box<crate::mann::MannWeights>>,
    },

    #[error("non-finite prediction at rollout step {step}")]
    NonFinitePrediction { step: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFinitePrediction { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
