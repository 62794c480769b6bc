//! Screening toolkit for tongue-lesion photographs.
//!
//! The pipeline fine-tunes a pretrained convolutional backbone on a small,
//! balanced image set, evaluates it (confusion matrix, accuracy,
//! sensitivity, specificity, ROC/AUC) and routes doubtful cases to a blind
//! physician review whose labels override the model (the AI + physician
//! ensemble).
//!
//! Module map:
//! - [`taxonomy`]: lesion classes, risk labels and the two inference tasks.
//! - [`dataset`]: ingestion, ROI cropping, resizing and deterministic splits.
//! - [`augment`]: online random flips for training presentations.
//! - [`backbone`], [`provider`], [`nn`], [`optim`], [`trainer`]: transfer learning.
//! - [`metrics`]: evaluation, ROC analysis and multi-run aggregation.
//! - [`triage`]: flagging, the review store and ensemble decisions.
//! - [`render`]: static plots and prediction overlays.
//! - [`exec`]: sequential / rayon-parallel execution strategy.

pub mod augment;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod provider;
pub mod render;
pub mod rng;
pub mod taxonomy;
pub mod trainer;
pub mod triage;

pub use error::{Error, Result};
pub use exec::Exec;
pub use taxonomy::{LesionClass, RiskLabel, TaskClass, TaskKind, TaskSpec};
