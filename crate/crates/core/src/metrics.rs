//! Evaluation: confusion matrices, accuracy / sensitivity / specificity,
//! ROC curves with trapezoidal AUC, and mean ± std aggregation over runs.
//!
//! Undefined metrics (zero denominators) are errors, never 0 or NaN.
//! Values are stored at full precision and rounded only when formatted.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{TaskClass, TaskKind, TaskSpec};
use crate::{Error, Result};

/// Decision threshold on the positive-class probability for the binary task.
pub const BINARY_THRESHOLD: f64 = 0.5;

/// Class index predicted from a score vector. Binary: positive iff its
/// probability is at least 0.5 (ties go to the positive class).
/// Multiclass: argmax, ties to the lowest declared index.
pub fn predicted_index(task: TaskSpec, scores: &[f64]) -> usize {
    match task.kind {
        TaskKind::Binary => {
            let pos = task.index_of(task.positive_class()).expect("positive class in task");
            if scores[pos] >= BINARY_THRESHOLD { pos } else { 1 - pos }
        }
        TaskKind::Multiclass => argmax(scores),
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Prediction/target counts. `counts[output][target]`: rows are predicted
/// classes, columns target classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<TaskClass>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn accuracy(&self) -> Result<Ratio<u64>> {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_, "accuracy of an empty matrix")
    }

    pub fn sensitivity(&self) -> Result<Ratio<u64>> {
        ratio(self.tp, self.tp + self.fn_, "sensitivity without positive targets")
    }

    pub fn specificity(&self) -> Result<Ratio<u64>> {
        ratio(self.tn, self.tn + self.fp, "specificity without negative targets")
    }
}

fn ratio(num: u64, den: u64, what: &str) -> Result<Ratio<u64>> {
    if den == 0 {
        Err(Error::UndefinedMetric(what.to_string()))
    } else {
        Ok(Ratio::new(num, den))
    }
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl ConfusionMatrix {
    pub fn new(classes: &[TaskClass]) -> Self {
        let n = classes.len();
        Self { classes: classes.to_vec(), counts: vec![vec![0; n]; n] }
    }

    pub fn from_counts(classes: &[TaskClass], counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|row| row.len() != n) {
            return Err(Error::Metrics(format!("counts must be a {n}x{n} grid")));
        }
        Ok(Self { classes: classes.to_vec(), counts })
    }

    pub fn index_of(&self, class: TaskClass) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .ok_or_else(|| Error::Metrics(format!("label {class} is not one of the matrix classes")))
    }

    pub fn get(&self, output: TaskClass, target: TaskClass) -> Result<u64> {
        Ok(self.counts[self.index_of(output)?][self.index_of(target)?])
    }

    pub fn record(&mut self, output: TaskClass, target: TaskClass) -> Result<()> {
        let (o, t) = (self.index_of(output)?, self.index_of(target)?);
        self.counts[o][t] += 1;
        Ok(())
    }

    /// Moves one item of `target` from `from` to `to` output.
    pub(crate) fn reassign(&mut self, target: TaskClass, from: TaskClass, to: TaskClass) -> Result<()> {
        let (t, f, n) = (self.index_of(target)?, self.index_of(from)?, self.index_of(to)?);
        if self.counts[f][t] == 0 {
            return Err(Error::Metrics(format!("no item of target {target} predicted as {from}")));
        }
        self.counts[f][t] -= 1;
        self.counts[n][t] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Number of items whose target is `class`.
    pub fn target_total(&self, class: TaskClass) -> Result<u64> {
        let t = self.index_of(class)?;
        Ok(self.counts.iter().map(|row| row[t]).sum())
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, v)| i == j || *v == 0))
    }

    /// One-vs-rest reduction around `positive`.
    pub fn binary_counts(&self, positive: TaskClass) -> Result<BinaryCounts> {
        let p = self.index_of(positive)?;
        let tp = self.counts[p][p];
        let col: u64 = self.counts.iter().map(|row| row[p]).sum();
        let row: u64 = self.counts[p].iter().sum();
        let fn_ = col - tp;
        let fp = row - tp;
        let tn = self.total() - tp - fn_ - fp;
        Ok(BinaryCounts { tp, tn, fp, fn_ })
    }

    /// `trace / total` as an exact fraction.
    pub fn accuracy_exact(&self) -> Result<Ratio<u64>> {
        ratio(self.trace(), self.total(), "accuracy of an empty matrix")
    }

    /// Text grid in the output-rows / target-columns layout.
    pub fn render(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.code().len())
            .chain(self.counts.iter().flatten().map(|v| v.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(6)
            + 2;
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "out\\tgt");
        for c in &self.classes {
            let _ = write!(s, "{:>width$}", c.code());
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            let _ = write!(s, "{:<width$}", c.code());
            for v in row {
                let _ = write!(s, "{v:>width$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Builds the confusion matrix of paired predictions and targets.
pub fn confusion(predictions: &[TaskClass], targets: &[TaskClass], classes: &[TaskClass]) -> Result<ConfusionMatrix> {
    if predictions.len() != targets.len() {
        return Err(Error::Metrics(format!(
            "{} predictions but {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, t) in predictions.iter().zip(targets) {
        cm.record(*p, *t)?;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.accuracy_exact().map(ratio_f64)
}

/// True-positive rate of `positive` (one-vs-rest for more than two classes).
pub fn sensitivity(cm: &ConfusionMatrix, positive: TaskClass) -> Result<f64> {
    cm.binary_counts(positive)?.sensitivity().map(ratio_f64)
}

/// True-negative rate with respect to `positive`.
pub fn specificity(cm: &ConfusionMatrix, positive: TaskClass) -> Result<f64> {
    cm.binary_counts(positive)?.specificity().map(ratio_f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// 1 - specificity.
    pub fpr: f64,
    /// Sensitivity.
    pub tpr: f64,
    /// Scores at or above this value count as positive; `None` for the
    /// all-negative starting point.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub operating_point: RocPoint,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            let t = p.threshold.map(|t| t.to_string()).unwrap_or_else(|| "inf".into());
            let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, t);
        }
        s
    }
}

pub fn roc(scores: &[f64], targets: &[TaskClass], positive: TaskClass) -> Result<RocCurve> {
    if scores.len() != targets.len() {
        return Err(Error::Metrics(format!("{} scores but {} targets", scores.len(), targets.len())));
    }
    let labels: Vec<bool> = targets.iter().map(|t| *t == positive).collect();
    roc_binary(scores, &labels)
}

/// Sweeps the threshold over every distinct score (descending) and
/// integrates the curve with the trapezoidal rule.
pub fn roc_binary(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Metrics(format!("{} scores but {} targets", scores.len(), positive.len())));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Metrics(format!("score {bad} outside [0, 1]")));
    }
    let p = positive.iter().filter(|b| **b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("ROC needs both positive and negative targets".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (pf, nf) = (p as f64, n as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: None }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("curve starts with a point");
        let next = RocPoint { fpr: fp as f64 / nf, tpr: tp as f64 / pf, threshold: Some(threshold) };
        auc += (next.fpr - prev.fpr) * (next.tpr + prev.tpr) / 2.0;
        points.push(next);
    }

    let at = |t: f64| {
        let tp = scores.iter().zip(positive).filter(|(s, pos)| **pos && **s >= t).count();
        let fp = scores.iter().zip(positive).filter(|(s, pos)| !**pos && **s >= t).count();
        RocPoint { fpr: fp as f64 / nf, tpr: tp as f64 / pf, threshold: Some(t) }
    };
    Ok(RocCurve { points, auc, operating_point: at(BINARY_THRESHOLD) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub class: TaskClass,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Metrics of one trained model on its validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub backbone: String,
    pub task: TaskKind,
    pub run_seed: u64,
    pub accuracy: f64,
    /// Sensitivity for the task's positive (pre-cancerous) class.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub train_seconds: f64,
    pub per_class: Vec<ClassRates>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Evaluates score vectors against targets. Metrics that are undefined
    /// for this particular validation set are left absent.
    pub fn evaluate(
        backbone: &str,
        task: TaskSpec,
        run_seed: u64,
        train_seconds: f64,
        scores: &[Vec<f64>],
        targets: &[TaskClass],
    ) -> Result<Self> {
        let classes = task.classes();
        let predictions: Vec<TaskClass> = scores.iter().map(|s| classes[predicted_index(task, s)]).collect();
        let cm = confusion(&predictions, targets, classes)?;
        let positive = task.positive_class();
        let pos_idx = task.index_of(positive).expect("positive class in task");
        let pos_scores: Vec<f64> = scores.iter().map(|s| s[pos_idx].clamp(0.0, 1.0)).collect();
        let per_class = classes
            .iter()
            .map(|c| ClassRates {
                class: *c,
                sensitivity: sensitivity(&cm, *c).ok(),
                specificity: specificity(&cm, *c).ok(),
            })
            .collect();
        Ok(Self {
            backbone: backbone.to_string(),
            task: task.kind,
            run_seed,
            accuracy: accuracy(&cm)?,
            sensitivity: sensitivity(&cm, positive).ok(),
            specificity: specificity(&cm, positive).ok(),
            auc: roc(&pos_scores, targets, positive).ok().map(|r| r.auc),
            train_seconds,
            per_class,
            confusion: cm,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("summary of zero values".into()));
    }
    let n = values.len();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Summing identical values can drift in the last bit; keep them exact.
    let mean = if min == max { min } else { values.iter().sum::<f64>() / n as f64 };
    let std = (n >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Summary { mean: mean.clamp(min, max), std, min, max, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub backbone: String,
    pub task: TaskKind,
    pub runs: usize,
    pub run_seeds: Vec<u64>,
    pub accuracy: Summary,
    pub sensitivity: Option<Summary>,
    pub specificity: Option<Summary>,
    pub auc: Option<Summary>,
    pub train_seconds: Summary,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::UndefinedMetric("aggregate of zero reports".into()))?;
    if let Some(other) = reports.iter().find(|r| r.backbone != first.backbone || r.task != first.task) {
        return Err(Error::Metrics(format!(
            "cannot aggregate {} {} with {} {}",
            first.backbone, first.task, other.backbone, other.task
        )));
    }
    let optional = |f: fn(&MetricsReport) -> Option<f64>| -> Option<Summary> {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        summarize(&vals).ok()
    };
    Ok(AggregateReport {
        backbone: first.backbone.clone(),
        task: first.task,
        runs: reports.len(),
        run_seeds: reports.iter().map(|r| r.run_seed).collect(),
        accuracy: summarize(&reports.iter().map(|r| r.accuracy).collect::<Vec<_>>())?,
        sensitivity: optional(|r| r.sensitivity),
        specificity: optional(|r| r.specificity),
        auc: optional(|r| r.auc),
        train_seconds: summarize(&reports.iter().map(|r| r.train_seconds).collect::<Vec<_>>())?,
    })
}

fn mean_pm_std(s: &Summary) -> String {
    match s.std {
        Some(std) => format!("{:.2} ± {:.2}", s.mean, std),
        None => format!("{:.2}", s.mean),
    }
}

fn mean_only(s: Option<&Summary>) -> String {
    s.map(|s| format!("{:.2}", s.mean)).unwrap_or_else(|| "-".into())
}

/// Tab-separated results table: `Model, A_CC, S_ENS, S_PEC, T_SEC` for the
/// binary task, `Model, A_CC, T_SEC` for the multiclass task.
pub fn format_table(task: TaskKind, rows: &[AggregateReport]) -> String {
    let mut s = String::new();
    match task {
        TaskKind::Binary => s.push_str("Model\tA_CC\tS_ENS\tS_PEC\tT_SEC\n"),
        TaskKind::Multiclass => s.push_str("Model\tA_CC\tT_SEC\n"),
    }
    for r in rows.iter().filter(|r| r.task == task) {
        s.push_str(&format_row(r));
        s.push('\n');
    }
    s
}

pub fn format_row(r: &AggregateReport) -> String {
    match r.task {
        TaskKind::Binary => format!(
            "{}\t{}\t{}\t{}\t{:.2}",
            r.backbone,
            mean_pm_std(&r.accuracy),
            mean_only(r.sensitivity.as_ref()),
            mean_only(r.specificity.as_ref()),
            r.train_seconds.mean
        ),
        TaskKind::Multiclass => {
            format!("{}\t{}\t{:.2}", r.backbone, mean_pm_std(&r.accuracy), r.train_seconds.mean)
        }
    }
}
