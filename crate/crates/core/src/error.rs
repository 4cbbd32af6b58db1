use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped roughly by the module that raises them; `class()`
/// buckets them for the command-line exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("both masks are empty")]
    BothEmpty,
    #[error("pixel set is empty")]
    EmptySet,

    #[error("empty batch")]
    EmptyBatch,
    #[error("support set is empty")]
    EmptySupport,

    #[error("class {class_id} has {available} samples, episode needs {needed}")]
    InsufficientSamples {
        class_id: String,
        available: usize,
        needed: usize,
    },
    #[error("patient {patient_id} has {available} unlabeled slices, task needs {needed}")]
    InsufficientUnlabeled {
        patient_id: String,
        available: usize,
        needed: usize,
    },
    #[error("patient {0} has no labeled slice to use as query")]
    NoLabeledQuery(String),
    #[error("patient {patient_id} has {available} slices, task needs {needed}")]
    InsufficientSlices {
        patient_id: String,
        available: usize,
        needed: usize,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("mask {path} is {actual:?}, slice is {expected:?}")]
    MaskShapeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleVersion(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no ground truth for patient {patient_id} slice {index}")]
    MissingGroundTruth { patient_id: String, index: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Config,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingFile(_)
            | Error::CorruptImage { .. }
            | Error::MaskShapeMismatch { .. }
            | Error::InvalidManifest(_)
            | Error::MissingGroundTruth { .. }
            | Error::InsufficientSamples { .. }
            | Error::InsufficientUnlabeled { .. }
            | Error::NoLabeledQuery(_)
            | Error::InsufficientSlices { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::IncompatibleVersion(_) | Error::ConfigMismatch(_) | Error::InvalidConfig(_) => {
                ErrorClass::Config
            }
            _ => ErrorClass::Runtime,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
