use std::path::PathBuf;

/// Errors produced anywhere in the editing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error at step {step:?}: {message}")]
    Numeric { step: Option<usize>, message: String },

    #[error("shape mismatch: {0}")]
    Structural(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid instruction: {0}")]
    Instruction(String),

    #[error("propagation failed on frame {frame}: {message}")]
    Propagation { frame: usize, message: String },

    #[error("tracking failed: {0}")]
    Tracking(String),

    #[error("optimization error at iteration {iteration}: {message}")]
    Optimization { iteration: usize, message: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("stage `{stage}` cannot run: {message}")]
    Ordering { stage: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cancelled before stage `{0}`")]
    Cancelled(String),

    #[error("project is busy: {0}")]
    Busy(String),

    #[error("remote adapter error: {0}")]
    Remote(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(step: Option<usize>, message: impl Into<String>) -> Self {
        Error::Numeric {
            step,
            message: message.into(),
        }
    }

    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ (Error::Stage { .. } | Error::Cancelled(_) | Error::Ordering { .. }) => e,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Name of the failing stage, when known.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } | Error::Ordering { stage, .. } => Some(stage),
            Error::Cancelled(stage) => Some(stage),
            _ => None,
        }
    }

    /// The error beneath any stage wrappers.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root_cause(),
            other => other,
        }
    }

    /// Short machine-readable kind of the underlying error.
    pub fn code(&self) -> &'static str {
        match self.root_cause() {
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Structural(_) => "structural",
            Error::Domain(_) => "domain",
            Error::Instruction(_) => "instruction",
            Error::Propagation { .. } => "propagation",
            Error::Tracking(_) => "tracking",
            Error::Optimization { .. } => "optimization",
            Error::Training { .. } => "training",
            Error::Pairing(_) => "pairing",
            Error::Metric(_) => "metric",
            Error::Ordering { .. } => "ordering",
            Error::Stage { .. } => "stage",
            Error::Cancelled(_) => "cancelled",
            Error::Busy(_) => "busy",
            Error::Remote(_) => "remote",
            Error::NotFound(_) => "not_found",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Tensor(_) => "tensor",
        }
    }
}
