use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("invalid class {class} (class count {count})")]
    InvalidClass { class: usize, count: usize },

    #[error("label {label} out of range for {count} classes")]
    LabelOutOfRange { label: u8, count: usize },

    #[error("scene generation failed for rule {rule}: no feasible layout after {retries} retries")]
    Generation { rule: String, retries: usize },

    #[error("invalid scene spec: {0}")]
    SceneSpec(String),

    #[error("class {class} has zero pixel frequency")]
    ZeroFrequency { class: usize },

    #[error("classifier weight row for class {class} has zero norm")]
    ZeroNormRow { class: usize },

    #[error("erasure protocol needs at least 4 classes, got {0}")]
    TooFewClasses(usize),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("format error in {path:?}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("hash mismatch for {path:?}: manifest records {expected}, found {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Name of the module whose contract was violated, used by the CLI.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Contract { .. } => "tensor_core",
            Error::Generation { .. }
            | Error::SceneSpec(_)
            | Error::ZeroFrequency { .. }
            | Error::LabelOutOfRange { .. } => "datagen",
            Error::CheckpointMismatch(_) => "model",
            Error::InvalidClass { .. } => "dropclass",
            Error::NonFiniteLoss { .. } => "trainer",
            Error::ZeroNormRow { .. } | Error::TooFewClasses(_) => "eval",
            Error::Format { .. } | Error::Io { .. } => "io",
            Error::Config(_) | Error::HashMismatch { .. } => "cli",
        }
    }
}
