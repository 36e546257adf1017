use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("bad magic bytes in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("layer `{layer}` has shape {found:?}, expected {expected:?}")]
    LayerShape {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("scene `{scene}`: expected {expected} bands, found {found}")]
    BandCount {
        scene: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate record for {series}/({a},{b}) at timestamp {timestamp}")]
    DuplicateRecord {
        series: String,
        a: usize,
        b: usize,
        timestamp: String,
    },

    #[error("latent store is locked by another writer: {0}")]
    Locked(PathBuf),

    #[error("scene `{scene}`: degenerate label set ({positives} positives, {negatives} negatives)")]
    DegenerateLabels {
        scene: String,
        positives: usize,
        negatives: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Dimension {
            op,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(context(), e))
    }
}
