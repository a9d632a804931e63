use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("empty manifest {0}")]
    EmptyManifest(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("k = {k} exceeds reference size {available}")]
    KTooLarge { k: usize, available: usize },

    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated tensor data")]
    TruncatedData,

    #[error("malformed {format} file: {reason}")]
    Malformed { format: &'static str, reason: String },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor {name:?} has shape {actual:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("rank deficient")]
    RankDeficient,

    #[error("insufficient correspondences")]
    InsufficientCorrespondences,

    #[error("numerical failure in layer {layer}")]
    NumericalFailure { layer: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no valid patches")]
    NoValidPatches,

    #[error("empty depth")]
    EmptyDepth,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("provider {provider} does not supply {what}")]
    Unsupported {
        provider: String,
        what: &'static str,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png decode: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Wrap with a pipeline stage label.
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by configuration or weights rather than input data.
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_)
                | Error::MissingTensor(_)
                | Error::TensorShape { .. }
                | Error::InvalidArgument(_)
                | Error::Unsupported { .. }
        )
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
