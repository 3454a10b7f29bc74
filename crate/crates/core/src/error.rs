use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module of the crate.
///
/// Each message starts with the module whose contract was violated so that a
/// failing CLI run can be traced to the responsible component.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("tensor: non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("tensor: dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor: zero-norm row {row} in {op}")]
    ZeroVector { op: &'static str, row: usize },
    #[error("tensor: SVD did not converge")]
    SvdFailure,
    #[error("tensor: temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("tensor: not a probability vector ({0})")]
    NotAProbability(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("bridge: class {0} has no tokens or shots")]
    EmptyClass(usize),
    #[error("bridge: inverse image of row {0} has zero norm")]
    ZeroInverseImage(usize),
    #[error("bridge: class id {class} out of range for {classes} classes")]
    UnknownClass { class: usize, classes: usize },

    #[error("inference: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("inference: invalid blend config: {0}")]
    InvalidBlend(String),

    #[error("training: invalid config: {0}")]
    InvalidTrainConfig(String),
    #[error("training: task has no validation split")]
    NoValidationSplit,
    #[error("training: loss diverged at epoch {0}")]
    DivergedLoss(usize),

    #[error("hpsearch: validation split is empty")]
    EmptyValidation,
    #[error("hpsearch: invalid search spec: {0}")]
    InvalidSearchSpec(String),

    #[error("synthgen: invalid spec: {0}")]
    InvalidSpec(String),

    #[error("datastore: bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("datastore: unsupported version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("datastore: unsupported dtype {dtype} in {path}")]
    UnsupportedDtype { path: PathBuf, dtype: u8 },
    #[error("datastore: truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("datastore: dimensions overflow in {0}")]
    DimOverflow(PathBuf),
    #[error("datastore: missing file {0}")]
    MissingFile(PathBuf),
    #[error("datastore: shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("datastore: manifest hash mismatch (model was trained on {expected}, task is {found})")]
    ManifestHashMismatch { expected: String, found: String },
    #[error("datastore: invalid manifest {path}: {reason}")]
    InvalidManifest { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
