use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::taxonomy::{risk_of, LesionClass, RiskLabel, TaskClass, TaskSpec};
use crate::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "tonguescreen.manifest/1";

/// Crop rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Roi {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { x: 0, y: 0, w: width, h: height }
    }

    /// Positive area and fully inside a `width` x `height` frame.
    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        let fits = |start: u32, len: u32, limit: u32| {
            len > 0 && start.checked_add(len).is_some_and(|end| end <= limit)
        };
        if fits(self.x, self.w, width) && fits(self.y, self.h, height) {
            Ok(())
        } else {
            Err(Error::RoiOutOfBounds { roi: self.to_string(), width, height })
        }
    }
}

impl fmt::Display for Roi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Canonical copy, relative to the manifest's directory.
    pub path: String,
    #[serde(rename = "class")]
    pub lesion_class: LesionClass,
    pub risk: RiskLabel,
    pub width: u32,
    pub height: u32,
    pub roi: Option<Roi>,
    pub annotator: String,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<String>,
        lesion_class: LesionClass,
        width: u32,
        height: u32,
        roi: Option<Roi>,
        annotator: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            lesion_class,
            risk: risk_of(lesion_class),
            width,
            height,
            roi,
            annotator: annotator.into(),
        }
    }

    fn validate(&self, task: TaskSpec) -> Result<()> {
        if self.risk != risk_of(self.lesion_class) {
            return Err(Error::Config(format!(
                "record '{}': risk {} disagrees with class {}",
                self.id, self.risk, self.lesion_class
            )));
        }
        if let Some(roi) = self.roi {
            roi.check_within(self.width, self.height)?;
        }
        if task.label_for(self.lesion_class).is_none() {
            return Err(Error::ClassNotInTask {
                class: self.lesion_class.to_string(),
                task: task.kind.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    task: TaskSpec,
    created_at: DateTime<Utc>,
    checksum: String,
    records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task: TaskSpec,
    pub created_at: DateTime<Utc>,
    pub checksum: String,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(task: TaskSpec, records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            r.validate(task)?;
        }
        let checksum = checksum_of(task, &records)?;
        Ok(Self { task, created_at: Utc::now(), checksum, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Task label of a record (risk label for the binary task).
    pub fn label_of(&self, record: &ImageRecord) -> TaskClass {
        self.task
            .label_for(record.lesion_class)
            .expect("manifest records belong to the task")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        let header = Header {
            schema: MANIFEST_SCHEMA.to_string(),
            task: self.task,
            created_at: self.created_at,
            checksum: self.checksum.clone(),
            records: self.records.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Config(format!("{}: empty manifest", path.display()))),
        };
        if header.schema != MANIFEST_SCHEMA {
            return Err(Error::Config(format!(
                "{}: unsupported manifest schema '{}'",
                path.display(),
                header.schema
            )));
        }
        let mut records = Vec::with_capacity(header.records);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<ImageRecord>(&line)?);
        }
        let mut manifest = DatasetManifest::new(header.task, records)?;
        if manifest.checksum != header.checksum {
            return Err(Error::Config(format!(
                "{}: checksum mismatch (header {}, content {})",
                path.display(),
                header.checksum,
                manifest.checksum
            )));
        }
        manifest.created_at = header.created_at;
        Ok(manifest)
    }
}

fn checksum_of(task: TaskSpec, records: &[ImageRecord]) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(task.kind.to_string().as_bytes());
    for r in records {
        hasher.update(b"\n");
        hasher.update(serde_json::to_vec(r)?);
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
