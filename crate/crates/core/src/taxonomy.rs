//! Lesion classes, their clinical risk and the class sets of the two
//! inference tasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The superficial tongue lesions known to the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LesionClass {
    OralThrush,
    FissuredTongue,
    GeographicTongue,
    HairyTongue,
    PigmentedFungiformPapillae,
    StrawberryTongue,
    Leukoplakia,
    Erythroplakia,
}

impl LesionClass {
    pub const ALL: [LesionClass; 8] = [
        LesionClass::OralThrush,
        LesionClass::FissuredTongue,
        LesionClass::GeographicTongue,
        LesionClass::HairyTongue,
        LesionClass::PigmentedFungiformPapillae,
        LesionClass::StrawberryTongue,
        LesionClass::Leukoplakia,
        LesionClass::Erythroplakia,
    ];

    pub fn code(self) -> &'static str {
        match self {
            LesionClass::OralThrush => "OT",
            LesionClass::FissuredTongue => "FT",
            LesionClass::GeographicTongue => "GT",
            LesionClass::HairyTongue => "HT",
            LesionClass::PigmentedFungiformPapillae => "PFP",
            LesionClass::StrawberryTongue => "ST",
            LesionClass::Leukoplakia => "LP",
            LesionClass::Erythroplakia => "EP",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            LesionClass::OralThrush => "Oral thrush",
            LesionClass::FissuredTongue => "Fissured tongue",
            LesionClass::GeographicTongue => "Geographic tongue",
            LesionClass::HairyTongue => "Hairy tongue",
            LesionClass::PigmentedFungiformPapillae => "Pigmented fungiform papillae",
            LesionClass::StrawberryTongue => "Strawberry tongue",
            LesionClass::Leukoplakia => "Leukoplakia",
            LesionClass::Erythroplakia => "Erythroplakia",
        }
    }

    /// Short description of what the lesion looks like, shown to reviewers.
    pub fn clinical_features(self) -> &'static str {
        match self {
            LesionClass::OralThrush => "Thick, white or creamy coloured deposits (spots).",
            LesionClass::FissuredTongue => {
                "Cracks of varying depth and sizes on the top and edges of the tongue."
            }
            LesionClass::GeographicTongue => {
                "Red areas of varying sizes surrounded by an irregular white border."
            }
            LesionClass::HairyTongue => "Hair-like appearance of varying colour on top of the tongue.",
            LesionClass::PigmentedFungiformPapillae => "Dark spots on the tongue.",
            LesionClass::StrawberryTongue => "Swollen, red tongue with bumps.",
            LesionClass::Leukoplakia => {
                "Whitish areas or spots, mostly on the lateral border, that cannot be scraped off."
            }
            LesionClass::Erythroplakia => {
                "Raised or smooth fiery red patch that often bleeds when scraped."
            }
        }
    }

    pub fn risk(self) -> RiskLabel {
        risk_of(self)
    }
}

/// Maps a lesion class onto its clinical risk. Total over all eight classes.
pub fn risk_of(class: LesionClass) -> RiskLabel {
    match class {
        LesionClass::OralThrush
        | LesionClass::FissuredTongue
        | LesionClass::GeographicTongue
        | LesionClass::HairyTongue
        | LesionClass::PigmentedFungiformPapillae
        | LesionClass::StrawberryTongue => RiskLabel::Benign,
        LesionClass::Leukoplakia | LesionClass::Erythroplakia => RiskLabel::PreCancerous,
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LesionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let code = s.trim();
        LesionClass::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(code))
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

impl TryFrom<String> for LesionClass {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<LesionClass> for String {
    fn from(value: LesionClass) -> Self {
        value.code().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLabel {
    Benign,
    PreCancerous,
}

impl RiskLabel {
    pub fn code(self) -> &'static str {
        match self {
            RiskLabel::Benign => "benign",
            RiskLabel::PreCancerous => "pre_cancerous",
        }
    }
}

impl fmt::Display for RiskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RiskLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "benign" => Ok(RiskLabel::Benign),
            "pre_cancerous" | "precancerous" => Ok(RiskLabel::PreCancerous),
            _ => Err(Error::UnknownClass(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Binary => "binary",
            TaskKind::Multiclass => "multiclass",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(TaskKind::Binary),
            "multiclass" => Ok(TaskKind::Multiclass),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected binary or multiclass)"
            ))),
        }
    }
}

/// A class of an inference task: a risk label for the binary task, a lesion
/// class for the multiclass one. Serialized as its code (`"benign"`, `"LP"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskClass {
    Risk(RiskLabel),
    Lesion(LesionClass),
}

impl TaskClass {
    pub fn code(self) -> &'static str {
        match self {
            TaskClass::Risk(r) => r.code(),
            TaskClass::Lesion(l) => l.code(),
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TaskClass::Risk(RiskLabel::Benign) => "Benign",
            TaskClass::Risk(RiskLabel::PreCancerous) => "Pre-cancerous",
            TaskClass::Lesion(l) => l.display_name(),
        }
    }

    pub fn risk(self) -> RiskLabel {
        match self {
            TaskClass::Risk(r) => r,
            TaskClass::Lesion(l) => l.risk(),
        }
    }
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(r) = s.parse::<RiskLabel>() {
            return Ok(TaskClass::Risk(r));
        }
        s.parse::<LesionClass>().map(TaskClass::Lesion)
    }
}

impl TryFrom<String> for TaskClass {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<TaskClass> for String {
    fn from(value: TaskClass) -> Self {
        value.code().to_string()
    }
}

const BINARY_CLASSES: [TaskClass; 2] = [
    TaskClass::Risk(RiskLabel::Benign),
    TaskClass::Risk(RiskLabel::PreCancerous),
];

// Declared order; confusion-matrix axes depend on it.
const MULTICLASS_CLASSES: [TaskClass; 5] = [
    TaskClass::Lesion(LesionClass::HairyTongue),
    TaskClass::Lesion(LesionClass::FissuredTongue),
    TaskClass::Lesion(LesionClass::GeographicTongue),
    TaskClass::Lesion(LesionClass::StrawberryTongue),
    TaskClass::Lesion(LesionClass::Leukoplakia),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "TaskKind", into = "TaskKind")]
pub struct TaskSpec {
    pub kind: TaskKind,
}

impl TaskSpec {
    pub const BINARY: TaskSpec = TaskSpec { kind: TaskKind::Binary };
    pub const MULTICLASS: TaskSpec = TaskSpec { kind: TaskKind::Multiclass };

    pub fn new(kind: TaskKind) -> Self {
        Self { kind }
    }

    /// Number of output classes.
    pub fn n(&self) -> usize {
        self.classes().len()
    }

    pub fn classes(&self) -> &'static [TaskClass] {
        classes_for(*self)
    }

    pub fn index_of(&self, class: TaskClass) -> Option<usize> {
        self.classes().iter().position(|c| *c == class)
    }

    /// The class that counts as "positive" for sensitivity, specificity and
    /// ROC analysis: the pre-cancerous class of the task.
    pub fn positive_class(&self) -> TaskClass {
        match self.kind {
            TaskKind::Binary => TaskClass::Risk(RiskLabel::PreCancerous),
            TaskKind::Multiclass => TaskClass::Lesion(LesionClass::Leukoplakia),
        }
    }

    /// The task label for an annotated lesion, if the lesion takes part in
    /// this task.
    pub fn label_for(&self, lesion: LesionClass) -> Option<TaskClass> {
        match self.kind {
            TaskKind::Binary => Some(TaskClass::Risk(risk_of(lesion))),
            TaskKind::Multiclass => {
                let c = TaskClass::Lesion(lesion);
                self.index_of(c).map(|_| c)
            }
        }
    }

    /// Parses a label and checks that it belongs to this task.
    pub fn parse_label(&self, raw: &str) -> Result<TaskClass> {
        let invalid = || Error::InvalidLabel {
            label: raw.to_string(),
            allowed: self.class_codes(),
        };
        let class: TaskClass = raw.parse().map_err(|_| invalid())?;
        self.index_of(class).map(|_| class).ok_or_else(invalid)
    }

    pub fn class_codes(&self) -> String {
        self.classes().iter().map(|c| c.code()).collect::<Vec<_>>().join(", ")
    }
}

impl From<TaskKind> for TaskSpec {
    fn from(kind: TaskKind) -> Self {
        TaskSpec { kind }
    }
}

impl From<TaskSpec> for TaskKind {
    fn from(task: TaskSpec) -> Self {
        task.kind
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (N={})", self.kind, self.n())
    }
}

pub fn classes_for(task: TaskSpec) -> &'static [TaskClass] {
    match task.kind {
        TaskKind::Binary => &BINARY_CLASSES,
        TaskKind::Multiclass => &MULTICLASS_CLASSES,
    }
}
