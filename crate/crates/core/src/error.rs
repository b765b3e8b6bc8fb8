use thiserror::Error;

#[derive(Debug, Error)]
pub enum LcviError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite log joint density at theta = {theta:?}")]
    NonFiniteLogJoint { theta: Vec<f64> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("target {target}: inner utility average {value} is not positive")]
    NonPositiveUtility { target: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("loss {0} has no closed-form Bayes estimator")]
    NoClosedForm(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LcviError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LcviError {
    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        LcviError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = LcviError> = std::result::Result<T, E>;
