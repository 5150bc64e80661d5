use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed manifest at line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate audio: {0}")]
    DegenerateAudio(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at step {step} (batch ids: {}): {detail}", batch.join(","))]
    NonFiniteLoss {
        step: usize,
        batch: Vec<String>,
        detail: String,
    },

    #[error("invalid config value for `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact {}: {what}", path.display())]
    MissingArtifact { path: PathBuf, what: String },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
