//! Doubtful-case routing and the AI + physician ensemble.
//!
//! Flagged items go to a review queue. A physician labels each one without
//! seeing the model's output; the physician label then replaces the model's
//! prediction for that item.
//!
//! The queue lives in an append-only JSONL event log. Writers take an
//! exclusive file lock and replay the log before appending, so several
//! processes (the CLI and the review service) can share one store. Readers
//! take no lock and ignore a trailing partial line.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::metrics::{accuracy, predicted_index, ConfusionMatrix};
use crate::taxonomy::{TaskClass, TaskKind, TaskSpec};
use crate::{Error, Result};

pub const STORE_SCHEMA: &str = "tonguescreen.review/1";

/// One evaluated image with the model's class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub image_path: String,
    pub scores: Vec<f64>,
    pub prediction: TaskClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TaskClass>,
}

impl ScoredItem {
    pub fn new(task: TaskSpec, id: impl Into<String>, image_path: impl Into<String>, scores: Vec<f64>) -> Self {
        let prediction = task.classes()[predicted_index(task, &scores)];
        Self { id: id.into(), image_path: image_path.into(), scores, prediction, target: None }
    }

    pub fn with_target(mut self, target: TaskClass) -> Self {
        self.target = Some(target);
        self
    }
}

/// Confidence threshold used in deployment mode when none is given.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlagReason {
    /// Evaluation mode: the prediction disagrees with the reference label.
    KnownMisclassification,
    /// Deployment mode: the top class probability is below the threshold.
    LowConfidence { max_score: f64, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicianLabel {
    pub item_id: String,
    pub label: TaskClass,
    pub reviewer: String,
    pub submitted_at: DateTime<Utc>,
    /// Whether the model's output was hidden from the reviewer.
    pub blind: bool,
}

/// A queued item. `revision` counts accepted writes to the item and is
/// used for compare-and-set label submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub task: TaskKind,
    /// Image reference relative to the run directory (the ROI crop when
    /// one exists).
    pub image_path: String,
    pub ai_scores: Vec<f64>,
    pub ai_prediction: TaskClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TaskClass>,
    pub flag_reason: FlagReason,
    pub revision: u64,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physician: Option<PhysicianLabel>,
}

impl ReviewItem {
    fn from_scored(task: TaskKind, s: &ScoredItem, reason: FlagReason) -> Self {
        Self {
            id: s.id.clone(),
            task,
            image_path: s.image_path.clone(),
            ai_scores: s.scores.clone(),
            ai_prediction: s.prediction,
            target: s.target,
            flag_reason: reason,
            revision: 0,
            status: ItemStatus::Pending,
            physician: None,
        }
    }

    /// The reviewer-facing view. Blind views carry no model output.
    pub fn view(&self, blind: bool) -> ReviewItemView {
        ReviewItemView {
            id: self.id.clone(),
            task: self.task,
            image_path: self.image_path.clone(),
            revision: self.revision,
            status: self.status,
            label: self.physician.as_ref().map(|p| p.label),
            reviewer: self.physician.as_ref().map(|p| p.reviewer.clone()),
            ai_scores: (!blind).then(|| self.ai_scores.clone()),
            ai_prediction: (!blind).then_some(self.ai_prediction),
            flag_reason: (!blind).then_some(self.flag_reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItemView {
    pub id: String,
    pub task: TaskKind,
    pub image_path: String,
    pub revision: u64,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TaskClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_prediction: Option<TaskClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag_reason: Option<FlagReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Ai,
    Physician,
}

/// Final per-item decision of the ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub item_id: String,
    pub final_class: TaskClass,
    pub source: DecisionSource,
}

/// Selects the items that need a physician.
///
/// With reference labels on every item, mispredictions are flagged. Without
/// them, `threshold` must be given and items whose top probability is below
/// it are flagged.
pub fn flag_for_review(task: TaskSpec, items: &[ScoredItem], threshold: Option<f64>) -> Result<Vec<ReviewItem>> {
    let kind = task.kind;
    if let Some(bad) = items.iter().find(|i| i.scores.len() != task.n()) {
        return Err(Error::Metrics(format!(
            "item '{}' has {} scores, the {} task needs {}",
            bad.id,
            bad.scores.len(),
            kind,
            task.n()
        )));
    }
    let have_targets = !items.is_empty() && items.iter().all(|i| i.target.is_some());
    if have_targets {
        return Ok(items
            .iter()
            .filter(|i| i.target != Some(i.prediction))
            .map(|i| ReviewItem::from_scored(kind, i, FlagReason::KnownMisclassification))
            .collect());
    }
    let Some(t) = threshold else {
        return Err(Error::FlagModeMissing);
    };
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Config(format!("confidence threshold must lie in (0, 1] (got {t})")));
    }
    Ok(items
        .iter()
        .filter_map(|i| {
            let max = i.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (max < t).then(|| ReviewItem::from_scored(kind, i, FlagReason::LowConfidence { max_score: max, threshold: t }))
        })
        .collect())
}

/// Per-item decisions: physician label when present, else the model's.
pub fn ensemble_decisions(items: &[ScoredItem], flagged: &[ReviewItem]) -> Vec<EnsembleDecision> {
    let labels: BTreeMap<&str, TaskClass> = flagged
        .iter()
        .filter_map(|f| f.physician.as_ref().map(|p| (f.id.as_str(), p.label)))
        .collect();
    items
        .iter()
        .map(|i| match labels.get(i.id.as_str()) {
            Some(label) => EnsembleDecision { item_id: i.id.clone(), final_class: *label, source: DecisionSource::Physician },
            None => EnsembleDecision { item_id: i.id.clone(), final_class: i.prediction, source: DecisionSource::Ai },
        })
        .collect()
}

/// The ensemble's confusion matrix: `base` with every flagged item moved
/// from the model's prediction to the physician's label. Errors while any
/// flagged item is still unlabeled.
pub fn ensemble_confusion(base: &ConfusionMatrix, flagged: &[ReviewItem]) -> Result<ConfusionMatrix> {
    let pending: Vec<String> = flagged
        .iter()
        .filter(|f| f.physician.is_none())
        .map(|f| f.id.clone())
        .collect();
    if !pending.is_empty() {
        return Err(Error::PendingReview { count: pending.len(), ids: pending.join(", ") });
    }
    let mut cm = base.clone();
    for f in flagged {
        let target = f
            .target
            .ok_or_else(|| Error::Metrics(format!("item '{}' has no reference label", f.id)))?;
        let label = f.physician.as_ref().expect("checked above").label;
        cm.reassign(target, f.ai_prediction, label)?;
    }
    Ok(cm)
}

/// `base` restricted to items whose final class is settled: pending flagged
/// items are dropped, labeled ones moved to the physician's class.
pub fn resolved_confusion(base: &ConfusionMatrix, flagged: &[ReviewItem]) -> Result<ConfusionMatrix> {
    let mut cm = base.clone();
    for f in flagged {
        let target = f
            .target
            .ok_or_else(|| Error::Metrics(format!("item '{}' has no reference label", f.id)))?;
        match &f.physician {
            Some(p) => cm.reassign(target, f.ai_prediction, p.label)?,
            None => {
                let (o, t) = (cm.index_of(f.ai_prediction)?, cm.index_of(target)?);
                if cm.counts[o][t] == 0 {
                    return Err(Error::Metrics(format!("item '{}' is not in the base matrix", f.id)));
                }
                cm.counts[o][t] -= 1;
            }
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    EvaluationLoaded {
        backbone: String,
        #[serde(default)]
        base_confusion: Option<ConfusionMatrix>,
        at: DateTime<Utc>,
    },
    ItemFlagged {
        item: ReviewItem,
    },
    LabelSubmitted {
        label: PhysicianLabel,
        revision: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema: String,
    task: TaskSpec,
    created_at: DateTime<Utc>,
}

/// Replayed store contents.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewState {
    pub task: TaskSpec,
    pub backbone: Option<String>,
    pub base_confusion: Option<ConfusionMatrix>,
    items: BTreeMap<String, ReviewItem>,
    order: Vec<String>,
}

impl ReviewState {
    fn new(task: TaskSpec) -> Self {
        Self { task, backbone: None, base_confusion: None, items: BTreeMap::new(), order: Vec::new() }
    }

    fn apply(&mut self, event: Event) -> Result<()> {
        match event {
            Event::EvaluationLoaded { backbone, base_confusion, .. } => {
                *self = ReviewState::new(self.task);
                self.backbone = Some(backbone);
                self.base_confusion = base_confusion;
            }
            Event::ItemFlagged { item } => {
                self.order.push(item.id.clone());
                self.items.insert(item.id.clone(), item);
            }
            Event::LabelSubmitted { label, revision } => {
                let item = self
                    .items
                    .get_mut(&label.item_id)
                    .ok_or_else(|| Error::Store(format!("label for unknown item '{}'", label.item_id)))?;
                item.revision = revision;
                item.status = ItemStatus::Labeled;
                item.physician = Some(label);
            }
        }
        Ok(())
    }

    pub fn is_loaded(&self) -> bool {
        self.backbone.is_some()
    }

    /// All flagged items in queue order.
    pub fn items(&self) -> Vec<&ReviewItem> {
        self.order.iter().map(|id| &self.items[id]).collect()
    }

    pub fn pending(&self) -> Vec<&ReviewItem> {
        self.items().into_iter().filter(|i| i.status == ItemStatus::Pending).collect()
    }

    pub fn get(&self, id: &str) -> Result<&ReviewItem> {
        self.items.get(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    pub fn report(&self) -> ReviewReport {
        let flagged: Vec<ReviewItem> = self.items().into_iter().cloned().collect();
        let labeled = flagged.iter().filter(|i| i.status == ItemStatus::Labeled).count();
        let pending = flagged.len() - labeled;
        let base_accuracy = self.base_confusion.as_ref().and_then(|cm| accuracy(cm).ok());
        let resolved = self.base_confusion.as_ref().and_then(|b| resolved_confusion(b, &flagged).ok());
        let ensemble = match &self.base_confusion {
            Some(base) if pending == 0 => ensemble_confusion(base, &flagged).ok(),
            _ => None,
        };
        ReviewReport {
            task: self.task.kind.to_string(),
            loaded: self.is_loaded(),
            backbone: self.backbone.clone(),
            flagged: flagged.len(),
            labeled,
            pending,
            complete: self.is_loaded() && pending == 0,
            base_accuracy,
            ensemble_accuracy: resolved.as_ref().and_then(|cm| accuracy(cm).ok()),
            base_confusion: self.base_confusion.clone(),
            ensemble_confusion: ensemble,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub task: String,
    pub loaded: bool,
    pub backbone: Option<String>,
    pub flagged: usize,
    pub labeled: usize,
    pub pending: usize,
    pub complete: bool,
    pub base_accuracy: Option<f64>,
    /// Accuracy over items with a settled class: unflagged items plus
    /// labeled flagged ones. Final once `complete`.
    pub ensemble_accuracy: Option<f64>,
    pub base_confusion: Option<ConfusionMatrix>,
    /// Present once every flagged item is labeled.
    pub ensemble_confusion: Option<ConfusionMatrix>,
}

/// A label line of a queue import file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub item_id: String,
    pub label: String,
    #[serde(default)]
    pub reviewer: String,
    pub revision: u64,
}

#[derive(Debug, Clone)]
pub struct ReviewStore {
    path: PathBuf,
}

impl ReviewStore {
    /// Creates an empty store; fails if `path` already exists.
    pub fn create(path: &Path, task: TaskSpec) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
            Error::Store(format!("cannot create review store {}: {e}", path.display()))
        })?;
        let header = Header { schema: STORE_SCHEMA.into(), task, created_at: Utc::now() };
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        f.sync_all()?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Store(format!("no review store at {}", path.display())));
        }
        let store = Self { path: path.to_path_buf() };
        store.state()?;
        Ok(store)
    }

    pub fn open_or_create(path: &Path, task: TaskSpec) -> Result<Self> {
        if path.exists() {
            let store = Self::open(path)?;
            let found = store.state()?.task;
            if found != task {
                return Err(Error::Store(format!("store {} holds task {found}, not {task}", path.display())));
            }
            Ok(store)
        } else {
            Self::create(path, task)
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn replay(file: &File, allow_partial_tail: bool) -> Result<ReviewState> {
        let mut text = String::new();
        BufReader::new(file).read_to_string(&mut text)?;
        if allow_partial_tail && !text.ends_with('\n') {
            // A concurrent writer is mid-append; its line is not committed yet.
            text.truncate(text.rfind('\n').map_or(0, |i| i + 1));
        }
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| Error::Store("empty review store".into()))?;
        let header: Header = serde_json::from_str(first)?;
        if header.schema != STORE_SCHEMA {
            return Err(Error::Store(format!("unsupported store schema '{}'", header.schema)));
        }
        let mut state = ReviewState::new(header.task);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(line)
                .map_err(|e| Error::Store(format!("corrupt event on line {}: {e}", n + 2)))?;
            state.apply(event)?;
        }
        Ok(state)
    }

    /// Current state. Takes no lock, so readers never block writers.
    pub fn state(&self) -> Result<ReviewState> {
        Self::replay(&File::open(&self.path)?, true)
    }

    /// Runs `f` on the current state under an exclusive lock and appends the
    /// events it returns.
    fn transact<T>(&self, f: impl FnOnce(&ReviewState) -> Result<(Vec<Event>, T)>) -> Result<T> {
        let mut file = OpenOptions::new().read(true).append(true).open(&self.path)?;
        file.lock()?;
        let result = (|| {
            let state = Self::replay(&file, false)?;
            let (events, out) = f(&state)?;
            let mut buf = String::new();
            for e in &events {
                buf.push_str(&serde_json::to_string(e)?);
                buf.push('\n');
            }
            file.write_all(buf.as_bytes())?;
            file.sync_data()?;
            Ok(out)
        })();
        file.unlock()?;
        result
    }

    /// Replaces the queue with a new evaluation's flagged items.
    pub fn load_evaluation(
        &self,
        backbone: &str,
        base_confusion: Option<ConfusionMatrix>,
        flagged: Vec<ReviewItem>,
    ) -> Result<()> {
        self.transact(|state| {
            if let Some(cm) = &base_confusion {
                if cm.classes != state.task.classes() {
                    return Err(Error::Store(format!("confusion matrix classes do not match task {}", state.task)));
                }
            }
            let mut events = vec![Event::EvaluationLoaded {
                backbone: backbone.to_string(),
                base_confusion,
                at: Utc::now(),
            }];
            let mut seen = std::collections::HashSet::new();
            for item in flagged {
                if !seen.insert(item.id.clone()) {
                    return Err(Error::DuplicateId(item.id));
                }
                events.push(Event::ItemFlagged { item });
            }
            Ok((events, ()))
        })
    }

    /// Records a physician label if `expected_revision` matches the item's
    /// current revision.
    pub fn submit_label(
        &self,
        id: &str,
        raw_label: &str,
        reviewer: &str,
        expected_revision: u64,
        blind: bool,
    ) -> Result<EnsembleDecision> {
        self.transact(|state| {
            let item = state.get(id)?;
            if item.status == ItemStatus::Labeled {
                return Err(Error::AlreadyLabeled(id.to_string()));
            }
            if item.revision != expected_revision {
                return Err(Error::RevisionConflict {
                    id: id.to_string(),
                    expected: expected_revision,
                    found: item.revision,
                });
            }
            let label = PhysicianLabel {
                item_id: id.to_string(),
                label: state.task.parse_label(raw_label)?,
                reviewer: reviewer.to_string(),
                submitted_at: Utc::now(),
                blind,
            };
            let decision = EnsembleDecision {
                item_id: id.to_string(),
                final_class: label.label,
                source: DecisionSource::Physician,
            };
            Ok((vec![Event::LabelSubmitted { label, revision: item.revision + 1 }], decision))
        })
    }

    /// Writes the pending queue as JSONL, one item view per line.
    pub fn export_queue(&self, path: &Path, blind: bool) -> Result<usize> {
        let state = self.state()?;
        let pending = state.pending();
        let mut out = String::new();
        for item in &pending {
            out.push_str(&serde_json::to_string(&item.view(blind))?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(pending.len())
    }

    /// Applies a JSONL file of [`LabelSubmission`]s. The whole file is
    /// validated first; unknown ids or invalid labels reject it with every
    /// offender listed and nothing applied.
    pub fn import_labels(&self, path: &Path, blind: bool) -> Result<Vec<EnsembleDecision>> {
        let text = fs::read_to_string(path)?;
        let mut subs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let sub: LabelSubmission = serde_json::from_str(line)
                .map_err(|e| Error::Store(format!("{}:{}: {e}", path.display(), i + 1)))?;
            subs.push(sub);
        }
        let state = self.state()?;
        let unknown: Vec<&str> = subs
            .iter()
            .filter(|s| state.get(&s.item_id).is_err())
            .map(|s| s.item_id.as_str())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownItem(unknown.join(", ")));
        }
        let invalid: Vec<String> = subs
            .iter()
            .filter(|s| state.task.parse_label(&s.label).is_err())
            .map(|s| format!("{}={}", s.item_id, s.label))
            .collect();
        if !invalid.is_empty() {
            return Err(Error::InvalidLabel { label: invalid.join(", "), allowed: state.task.class_codes() });
        }
        subs.iter()
            .map(|s| self.submit_label(&s.item_id, &s.label, &s.reviewer, s.revision, blind))
            .collect()
    }
}
