use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A (model, layer, sample) triple whose dump file could not be resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpRef {
    pub model: String,
    pub layer: String,
    pub sample: String,
    pub path: PathBuf,
}

impl std::fmt::Display for DumpRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}) -> {}",
            self.model,
            self.layer,
            self.sample,
            self.path.display()
        )
    }
}

fn list_refs(refs: &[DumpRef]) -> String {
    refs.iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt tensor dump {path}: {reason}")]
    CorruptDump { path: PathBuf, reason: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("{} missing dump(s): {}", .0.len(), list_refs(.0))]
    MissingDump(Vec<DumpRef>),

    #[error("unknown layer '{layer}' for model '{model}'")]
    UnknownLayer { model: String, layer: String },

    #[error("unknown model '{0}'")]
    UnknownModel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("concept {0} is not present in any probe sample")]
    ConceptNotPresent(i32),

    #[error("unknown concept {0}")]
    UnknownConcept(i32),

    #[error("probe training for concept {concept} diverged at epoch {epoch}")]
    TrainingDiverged { concept: i32, epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no embedding for concept {concept} of representation '{representation}'")]
    MissingEmbedding {
        representation: String,
        concept: i32,
    },

    #[error("reference distribution has zero mean IoU")]
    DegenerateReference,

    #[error("concept lists differ between distributions")]
    ConceptListMismatch,

    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),

    #[error("cannot resolve selector '{selector}': {reason}")]
    Selector { selector: String, reason: String },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("PNG encoding failed: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
