//! Run-directory layout and model references.
//!
//! ```text
//! <run>/manifest.jsonl
//! <run>/images/                         canonical PNGs and _roi crops
//! <run>/split.json
//! <run>/weights/<provider_key>.ckpt     optional pretrained checkpoints
//! <run>/models/<backbone>-<task>/run-<k>/{weights.bin,model.json,curve.csv,curve.png,report.json,split.json}
//! <run>/models/<backbone>-<task>/aggregate.json
//! <run>/reports/table-<task>.tsv
//! <run>/eval/<backbone>-<task>-run-<k>/{predictions.jsonl,confusion.txt,metrics.json,roc.csv,roc.png}
//! <run>/review/store.jsonl
//! <run>/reports/review.json, reports/bars.png
//! <run>/overlays/
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use tonguescreen_core::backbone::BackboneName;
use tonguescreen_core::TaskKind;

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative paths are taken from the run directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn weights(&self) -> PathBuf {
        self.root.join("weights")
    }

    pub fn family(&self, backbone: BackboneName, task: TaskKind) -> PathBuf {
        self.root.join("models").join(family_name(backbone, task))
    }

    pub fn model(&self, r: &ModelRef) -> PathBuf {
        self.family(r.backbone, r.task).join(format!("run-{}", r.run))
    }

    pub fn eval(&self, r: &ModelRef) -> PathBuf {
        self.root.join("eval").join(r.slug())
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("review").join("store.jsonl")
    }

    pub fn overlays(&self) -> PathBuf {
        self.root.join("overlays")
    }

    /// Fails with a hint when a prerequisite file is missing.
    pub fn require(&self, path: &Path, produced_by: &str) -> anyhow::Result<()> {
        if !path.exists() {
            bail!("{} not found; run `tonguescreen {produced_by}` first", path.display());
        }
        Ok(())
    }
}

pub fn family_name(backbone: BackboneName, task: TaskKind) -> String {
    format!("{}-{task}", backbone.as_str().to_ascii_lowercase())
}

/// `<backbone>-<task>[/run-<k>]`, e.g. `vgg19-binary/run-2`. The run
/// defaults to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelRef {
    pub backbone: BackboneName,
    pub task: TaskKind,
    pub run: usize,
}

impl ModelRef {
    pub fn slug(&self) -> String {
        format!("{}-run-{}", family_name(self.backbone, self.task), self.run)
    }
}

impl fmt::Display for ModelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/run-{}", family_name(self.backbone, self.task), self.run)
    }
}

impl FromStr for ModelRef {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let s = s.trim().trim_start_matches("models/").trim_end_matches('/');
        let (family, run) = match s.split_once('/') {
            Some((f, r)) => {
                let k = r
                    .strip_prefix("run-")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| anyhow!("bad run '{r}' in model reference (expected run-<k>)"))?;
                (f, k)
            }
            None => (s, 0),
        };
        let (backbone, task) = family
            .rsplit_once('-')
            .ok_or_else(|| anyhow!("model reference '{s}' should look like <backbone>-<task>[/run-<k>]"))?;
        Ok(Self {
            backbone: backbone.parse()?,
            task: task.parse().with_context(|| format!("in model reference '{s}'"))?,
            run,
        })
    }
}
