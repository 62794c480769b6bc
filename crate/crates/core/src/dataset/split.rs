use std::collections::BTreeMap;
#[cfg(test)]
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::rng;
use crate::taxonomy::TaskClass;
use crate::{Error, Result};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
}

/// A deterministic train/validation partition of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub manifest_checksum: String,
}

impl SplitSpec {
    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        if self.train_ids.iter().any(|t| t == id) {
            Some(Partition::Train)
        } else if self.validation_ids.iter().any(|v| v == id) {
            Some(Partition::Validation)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.train_ids.len() + self.validation_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn balanced_split(manifest: &DatasetManifest, seed: u64) -> Result<SplitSpec> {
    balanced_split_with(manifest, seed, DEFAULT_TRAIN_FRACTION)
}

/// Partitions every task class into `train_fraction` training and the rest
/// validation. Requires equal per-class counts and an integral per-class
/// training count.
pub fn balanced_split_with(manifest: &DatasetManifest, seed: u64, train_fraction: f64) -> Result<SplitSpec> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = manifest
        .task
        .classes()
        .iter()
        .enumerate()
        .map(|(i, _)| (i, Vec::new()))
        .collect();
    for r in &manifest.records {
        let idx = manifest
            .task
            .index_of(manifest.label_of(r))
            .expect("manifest labels belong to the task");
        by_class.get_mut(&idx).expect("all classes present").push(&r.id);
    }

    let counts: Vec<(TaskClass, usize)> = manifest
        .task
        .classes()
        .iter()
        .zip(by_class.values())
        .map(|(c, ids)| (*c, ids.len()))
        .collect();
    let listing = || {
        counts.iter().map(|(c, n)| format!("{c}={n}")).collect::<Vec<_>>().join(", ")
    };
    let per_class = counts[0].1;
    if per_class == 0 || counts.iter().any(|(_, n)| *n != per_class) {
        return Err(Error::Split(format!("unbalanced manifest: {}", listing())));
    }
    let exact = per_class as f64 * train_fraction;
    let n_train = exact.round() as usize;
    if (exact - n_train as f64).abs() > 1e-9 || n_train == 0 || n_train == per_class {
        let (below, above) = nearest_feasible(per_class, train_fraction);
        return Err(Error::Split(format!(
            "{per_class} images per class cannot be split {:.0}/{:.0} integrally; nearest feasible per-class counts: {}",
            train_fraction * 100.0,
            (1.0 - train_fraction) * 100.0,
            [below, above].iter().flatten().map(|n| n.to_string()).collect::<Vec<_>>().join(" or "),
        )));
    }

    let mut rng = rng::seeded(seed);
    let mut train_ids = Vec::with_capacity(n_train * counts.len());
    let mut validation_ids = Vec::new();
    for ids in by_class.values() {
        let mut ids: Vec<&str> = ids.clone();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let (train, val) = ids.split_at(n_train);
        train_ids.extend(train.iter().map(|s| s.to_string()));
        validation_ids.extend(val.iter().map(|s| s.to_string()));
    }
    Ok(SplitSpec {
        seed,
        train_fraction,
        train_ids,
        validation_ids,
        manifest_checksum: manifest.checksum.clone(),
    })
}

fn feasible(n: usize, f: f64) -> bool {
    let exact = n as f64 * f;
    let k = exact.round();
    (exact - k).abs() <= 1e-9 && k >= 1.0 && (k as usize) < n
}

fn nearest_feasible(n: usize, f: f64) -> (Option<usize>, Option<usize>) {
    let below = (1..n).rev().find(|&m| feasible(m, f));
    let above = (n + 1..n + 1000).find(|&m| feasible(m, f));
    (below, above)
}

/// Training presentation order for one epoch: a permutation of the
/// training ids, deterministic in `(seed, epoch)`.
pub fn epoch_order(split: &SplitSpec, epoch: usize, seed: u64) -> Vec<String> {
    let mut order = split.train_ids.clone();
    order.sort_unstable();
    order.shuffle(&mut rng::epoch_rng(seed, epoch));
    order
}

#[cfg(test)]
pub(crate) fn covers(split: &SplitSpec, manifest: &DatasetManifest) -> bool {
    let train: HashSet<_> = split.train_ids.iter().collect();
    let val: HashSet<_> = split.validation_ids.iter().collect();
    train.is_disjoint(&val)
        && train.len() + val.len() == manifest.len()
        && manifest.records.iter().all(|r| train.contains(&r.id) || val.contains(&r.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;
    use crate::taxonomy::{LesionClass, TaskSpec};
    use proptest::prelude::*;

    fn manifest(task: TaskSpec, per_class: &[(LesionClass, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (class, n) in per_class {
            for i in 0..*n {
                let id = format!("{}-{i:03}", class.code());
                records.push(ImageRecord::new(&id, format!("images/{id}.png"), *class, 64, 64, None, ""));
            }
        }
        DatasetManifest::new(task, records).unwrap()
    }

    fn binary(n: usize) -> DatasetManifest {
        manifest(TaskSpec::BINARY, &[(LesionClass::HairyTongue, n), (LesionClass::Leukoplakia, n)])
    }

    #[test]
    fn binary_200_splits_160_40() {
        let m = binary(100);
        let s = balanced_split(&m, 1).unwrap();
        assert_eq!((s.train_ids.len(), s.validation_ids.len()), (160, 40));
        assert!(covers(&s, &m));
        assert_eq!(s.train_ids.iter().filter(|id| id.starts_with("LP")).count(), 80);
    }

    #[test]
    fn multiclass_300_splits_240_60() {
        let m = manifest(
            TaskSpec::MULTICLASS,
            &[
                (LesionClass::HairyTongue, 60),
                (LesionClass::FissuredTongue, 60),
                (LesionClass::GeographicTongue, 60),
                (LesionClass::StrawberryTongue, 60),
                (LesionClass::Leukoplakia, 60),
            ],
        );
        let s = balanced_split(&m, 9).unwrap();
        assert_eq!((s.train_ids.len(), s.validation_ids.len()), (240, 60));
        for c in ["HT", "FT", "GT", "ST", "LP"] {
            assert_eq!(s.train_ids.iter().filter(|id| id.starts_with(c)).count(), 48);
        }
    }

    #[test]
    fn binary_pool_groups_by_risk() {
        let m = manifest(
            TaskSpec::BINARY,
            &[(LesionClass::HairyTongue, 5), (LesionClass::GeographicTongue, 5), (LesionClass::Leukoplakia, 10)],
        );
        let s = balanced_split(&m, 3).unwrap();
        assert_eq!(s.train_ids.len(), 16);
    }

    #[test]
    fn deterministic_for_seed() {
        let m = binary(100);
        assert_eq!(balanced_split(&m, 7).unwrap(), balanced_split(&m, 7).unwrap());
        assert_ne!(balanced_split(&m, 7).unwrap().train_ids, balanced_split(&m, 8).unwrap().train_ids);
    }

    #[test]
    fn unbalanced_lists_counts() {
        let m = manifest(TaskSpec::BINARY, &[(LesionClass::HairyTongue, 10), (LesionClass::Leukoplakia, 5)]);
        let err = balanced_split(&m, 0).unwrap_err().to_string();
        assert!(err.contains("benign=10") && err.contains("pre_cancerous=5"), "{err}");
    }

    #[test]
    fn non_integral_suggests_counts() {
        let m = binary(12);
        let err = balanced_split(&m, 0).unwrap_err().to_string();
        assert!(err.contains("10 or 15"), "{err}");
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let m = binary(100);
        let s = balanced_split(&m, 1).unwrap();
        let e0 = epoch_order(&s, 0, 7);
        let e1 = epoch_order(&s, 1, 7);
        assert_ne!(e0, e1);
        assert_eq!(epoch_order(&s, 3, 7), epoch_order(&s, 3, 7));
        let mut sorted = e0.clone();
        sorted.sort();
        let mut train = s.train_ids.clone();
        train.sort();
        assert_eq!(sorted, train);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn split_partitions_exactly(per_class in 1usize..30, seed in any::<u64>()) {
            let m = binary(per_class * 5);
            let s = balanced_split(&m, seed).unwrap();
            prop_assert!(covers(&s, &m));
            prop_assert_eq!(s.train_ids.len(), per_class * 8);
            prop_assert_eq!(s.train_ids.iter().filter(|id| id.starts_with("HT")).count(), per_class * 4);
        }
    }
}
