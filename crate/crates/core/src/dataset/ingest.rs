use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::imaging::{crop_image, roi_path};
use super::manifest::{DatasetManifest, ImageRecord, Roi};
use crate::taxonomy::{LesionClass, TaskSpec};
use crate::{Error, Exec, Result};

/// One row of the annotation listing.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    /// Path of the source image, relative to the image directory.
    pub file: PathBuf,
    /// Raw class code as written by the annotator.
    pub label: String,
    pub annotator: String,
    pub roi: Option<Roi>,
}

impl Annotation {
    pub fn new(file: impl Into<PathBuf>, label: impl Into<String>) -> Self {
        Self { file: file.into(), label: label.into(), annotator: String::new(), roi: None }
    }

    pub fn with_roi(mut self, roi: Roi) -> Self {
        self.roi = Some(roi);
        self
    }

    pub fn by(mut self, annotator: impl Into<String>) -> Self {
        self.annotator = annotator.into();
        self
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    file: PathBuf,
    class: String,
    #[serde(default)]
    annotator: Option<String>,
    #[serde(default)]
    roi_x: Option<u32>,
    #[serde(default)]
    roi_y: Option<u32>,
    #[serde(default)]
    roi_w: Option<u32>,
    #[serde(default)]
    roi_h: Option<u32>,
}

/// Reads a CSV listing with columns `file,class[,annotator][,roi_x,roi_y,roi_w,roi_h]`.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<AnnotationRow>() {
        let row = row?;
        let roi = match (row.roi_x, row.roi_y, row.roi_w, row.roi_h) {
            (Some(x), Some(y), Some(w), Some(h)) => Some(Roi::new(x, y, w, h)),
            (None, None, None, None) => None,
            _ => {
                return Err(Error::Ingest {
                    file: row.file,
                    reason: "incomplete ROI (need roi_x, roi_y, roi_w, roi_h)".into(),
                })
            }
        };
        out.push(Annotation {
            file: row.file,
            label: row.class,
            annotator: row.annotator.unwrap_or_default(),
            roi,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub task: TaskSpec,
    /// Run directory; canonical copies go to `<out_dir>/images/`.
    pub out_dir: PathBuf,
    /// Lesion classes to leave out of the manifest (e.g. OT/PFP from the
    /// binary benign pool).
    pub exclude: Vec<LesionClass>,
    pub exec: Exec,
}

impl IngestOptions {
    pub fn new(task: TaskSpec, out_dir: impl Into<PathBuf>) -> Self {
        Self { task, out_dir: out_dir.into(), exclude: Vec::new(), exec: Exec::default() }
    }
}

struct Pending {
    id: String,
    source: PathBuf,
    class: LesionClass,
    annotator: String,
    roi: Option<Roi>,
}

/// Builds a manifest from an annotated image directory, writing canonical
/// 8-bit RGB PNG copies (and `_roi` crops) under `out_dir/images`.
pub fn ingest(image_dir: &Path, annotations: &[Annotation], opts: &IngestOptions) -> Result<DatasetManifest> {
    if annotations.is_empty() {
        return Err(Error::EmptyIngest(format!("no annotations for {}", image_dir.display())));
    }

    let mut pending = Vec::with_capacity(annotations.len());
    let mut ids = HashSet::new();
    for a in annotations {
        let source = image_dir.join(&a.file);
        let class: LesionClass = a.label.parse().map_err(|_| Error::Ingest {
            file: source.clone(),
            reason: format!("unknown label '{}'", a.label),
        })?;
        if opts.exclude.contains(&class) {
            continue;
        }
        if opts.task.label_for(class).is_none() {
            return Err(Error::Ingest {
                file: source,
                reason: format!("class {class} is not part of the {} task", opts.task.kind),
            });
        }
        let id = record_id(&a.file).ok_or_else(|| Error::Ingest {
            file: source.clone(),
            reason: "cannot derive an id from the file name".into(),
        })?;
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        pending.push(Pending { id, source, class, annotator: a.annotator.clone(), roi: a.roi });
    }
    if pending.is_empty() {
        return Err(Error::EmptyIngest("every annotation was excluded".into()));
    }

    let images_dir = opts.out_dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let records = opts.exec.try_map(&pending, |p| store_one(p, &images_dir))?;
    DatasetManifest::new(opts.task, records)
}

fn store_one(p: &Pending, images_dir: &Path) -> Result<ImageRecord> {
    let fail = |reason: String| Error::Ingest { file: p.source.clone(), reason };
    let bytes = fs::read(&p.source).map_err(|e| fail(e.to_string()))?;
    if bytes.is_empty() {
        return Err(fail("zero-byte file".into()));
    }
    let image = image::load_from_memory(&bytes).map_err(|e| fail(format!("not a decodable image: {e}")))?;
    let rgb = image.to_rgb8();
    let (width, height) = rgb.dimensions();
    if width == 0 || height == 0 {
        return Err(fail("zero-dimension image".into()));
    }
    if let Some(roi) = p.roi {
        roi.check_within(width, height).map_err(|e| fail(e.to_string()))?;
    }

    let file_name = format!("{}.png", p.id);
    let canonical = images_dir.join(&file_name);
    rgb.save(&canonical)?;
    if p.roi.is_some() {
        let crop = crop_image(&rgb, p.roi)?;
        crop.image.save(roi_path(&canonical))?;
    }
    Ok(ImageRecord::new(
        p.id.clone(),
        format!("images/{file_name}"),
        p.class,
        width,
        height,
        p.roi,
        p.annotator.clone(),
    ))
}

fn record_id(file: &Path) -> Option<String> {
    let stem = file.file_stem()?.to_str()?;
    let id: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    (!id.is_empty()).then_some(id)
}
