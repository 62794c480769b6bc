use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown class code '{0}'")]
    UnknownClass(String),

    #[error("class {class} is not part of the {task} task")]
    ClassNotInTask { class: String, task: String },

    #[error("ingestion failed for {file}: {reason}")]
    Ingest { file: PathBuf, reason: String },

    #[error("nothing to ingest: {0}")]
    EmptyIngest(String),

    #[error("duplicate record id '{0}'")]
    DuplicateId(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("region of interest {roi} lies outside the {width}x{height} image")]
    RoiOutOfBounds { roi: String, width: u32, height: u32 },

    #[error("split error: {0}")]
    Split(String),

    #[error("id '{0}' belongs to neither the training nor the validation partition")]
    ForeignId(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown backbone '{name}'; valid options: {options}")]
    UnknownBackbone { name: String, options: String },

    #[error("pretrained weights unavailable for '{key}': {instructions}")]
    MissingWeights { key: String, instructions: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("non-finite loss at iteration {iteration} (epoch {epoch}): {loss}")]
    NonFiniteLoss { iteration: usize, epoch: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid metric input: {0}")]
    Metrics(String),

    #[error("unknown review item '{0}'")]
    UnknownItem(String),

    #[error("review item '{id}' was modified concurrently (expected revision {expected}, found {found})")]
    RevisionConflict { id: String, expected: u64, found: u64 },

    #[error("review item '{0}' is already labeled")]
    AlreadyLabeled(String),

    #[error("invalid label '{label}': expected one of {allowed}")]
    InvalidLabel { label: String, allowed: String },

    #[error("{count} flagged item(s) still pending review: {ids}")]
    PendingReview { count: usize, ids: String },

    #[error("review store error: {0}")]
    Store(String),

    #[error("flagging requires targets (evaluation mode) or a confidence threshold (deployment mode)")]
    FlagModeMissing,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<image::ImageError> for Error {
    fn from(err: image::ImageError) -> Self {
        Error::Image(err.to_string())
    }
}
