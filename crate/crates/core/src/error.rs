use std::path::PathBuf;

use crate::autodiff::Shape;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("index {index} out of range in {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Shape),
    #[error("non-finite value while probing parameter `{param}`[{index}]")]
    NonFiniteProbe { param: String, index: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("enumeration guard exceeded: {vocab}^{max_len} sequences > {limit}")]
    EnumerationGuard {
        vocab: usize,
        max_len: usize,
        limit: u64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("group {group}: {detail}")]
    Group { group: usize, detail: String },
    #[error("non-finite {what} at step {step} (group {group:?})")]
    NonFinite {
        what: &'static str,
        step: usize,
        group: Option<usize>,
    },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("config {path}: key `{key}`: {detail}")]
    ConfigKey {
        path: PathBuf,
        key: String,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Stable short name of the variant, used in manifests.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Domain { .. } => "domain",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::NonFiniteProbe { .. } => "non_finite_probe",
            Error::DuplicateParameter(_) => "duplicate_parameter",
            Error::TokenOutOfVocab { .. } => "token_out_of_vocab",
            Error::Empty(_) => "empty",
            Error::EnumerationGuard { .. } => "enumeration_guard",
            Error::Config(_) => "config",
            Error::Group { .. } => "group",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint { .. } => "checkpoint",
            Error::ConfigKey { .. } => "config_key",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Prefixes the key path of a configuration error with `key`.
    pub fn at(self, key: &str) -> Self {
        match self {
            Error::Config(m) => match m.split_once(": ") {
                Some((path, rest)) if !path.contains(' ') => Error::Config(format!("{key}.{path}: {rest}")),
                _ => Error::Config(format!("{key}: {m}")),
            },
            other => other,
        }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::ConfigKey { .. })
    }
}
