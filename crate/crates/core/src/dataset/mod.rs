//! Annotated image inventory: ingestion, ROI cropping, resizing and the
//! deterministic balanced train/validation partition.

mod imaging;
mod ingest;
mod manifest;
mod split;

pub use imaging::{crop_image, crop_roi, resize_for, roi_path, Cropped};
pub use ingest::{ingest, read_annotations, Annotation, IngestOptions};
pub use manifest::{DatasetManifest, ImageRecord, Roi, MANIFEST_SCHEMA};
pub use split::{balanced_split, balanced_split_with, epoch_order, Partition, SplitSpec, DEFAULT_TRAIN_FRACTION};
