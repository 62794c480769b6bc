//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tonguescreen_core::augment::{AugmentPolicy, Flips};
use tonguescreen_core::backbone::{BackboneName, BackboneSpec};
use tonguescreen_core::dataset::{balanced_split, DatasetManifest, ImageRecord, SplitSpec};
use tonguescreen_core::metrics::{self, aggregate, format_table, roc_binary, ConfusionMatrix, MetricsReport};
use tonguescreen_core::nn::ParamGroup;
use tonguescreen_core::optim::SgdMomentum;
use tonguescreen_core::provider::{PretrainedProvider, ReferenceProvider};
use tonguescreen_core::rng::presentation_rng;
use tonguescreen_core::trainer::{build_model, repeat_runs, train, TrainConfig, TrainedModel};
use tonguescreen_core::triage::{flag_for_review, ReviewStore, ScoredItem};
use tonguescreen_core::{Exec, LesionClass, RiskLabel, TaskClass, TaskKind, TaskSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const PRE: TaskClass = TaskClass::Risk(RiskLabel::PreCancerous);

fn binary_matrix() -> ConfusionMatrix {
    // counts[output][target]: tn=20, fp=0, fn=1, tp=29
    ConfusionMatrix::from_counts(TaskSpec::BINARY.classes(), vec![vec![20, 1], vec![0, 29]]).unwrap()
}

fn multiclass_matrix() -> ConfusionMatrix {
    let classes = TaskSpec::MULTICLASS.classes();
    let gt = TaskSpec::MULTICLASS.index_of(TaskClass::Lesion(LesionClass::GeographicTongue)).unwrap();
    let st = TaskSpec::MULTICLASS.index_of(TaskClass::Lesion(LesionClass::StrawberryTongue)).unwrap();
    let mut counts = vec![vec![0u64; 5]; 5];
    for (i, row) in counts.iter_mut().enumerate() {
        row[i] = 12;
    }
    counts[gt][gt] = 10;
    counts[st][gt] = 2;
    ConfusionMatrix::from_counts(classes, counts).unwrap()
}

fn binary_metrics() -> Outcome {
    let cm = binary_matrix();
    let bc = cm.binary_counts(PRE).map_err(|e| e.to_string())?;
    let acc = bc.accuracy().map_err(|e| e.to_string())?;
    let sens = bc.sensitivity().map_err(|e| e.to_string())?;
    let spec = bc.specificity().map_err(|e| e.to_string())?;
    check(
        (bc.tn, bc.fp, bc.fn_, bc.tp) == (20, 0, 1, 29)
            && acc == Ratio::new(49, 50)
            && sens == Ratio::new(29, 30)
            && spec == Ratio::new(1, 1),
        format!("accuracy {acc}, sensitivity {sens}, specificity {spec}"),
    )
}

fn multiclass_accuracy() -> Outcome {
    let cm = multiclass_matrix();
    let exact = cm.accuracy_exact().map_err(|e| e.to_string())?;
    let acc = metrics::accuracy(&cm).map_err(|e| e.to_string())?;
    let shown = format!("{acc:.2}");
    check(
        exact == Ratio::new(58, 60) && (acc - 0.9667).abs() < 5e-5 && shown == "0.97",
        format!("accuracy {exact} = {acc:.4}, shown as {shown}"),
    )
}

/// Score vectors whose predictions reproduce `cm` cell by cell.
fn items_for(task: TaskSpec, cm: &ConfusionMatrix) -> Vec<ScoredItem> {
    let n = task.n();
    let mut items = Vec::new();
    for (o, row) in cm.counts.iter().enumerate() {
        for (t, count) in row.iter().enumerate() {
            for k in 0..*count {
                let mut scores = vec![0.0; n];
                scores[o] = 1.0;
                let id = format!("{}-{}-{k}", cm.classes[t].code(), cm.classes[o].code());
                let item = ScoredItem::new(task, id.clone(), format!("images/{id}.png"), scores)
                    .with_target(cm.classes[t]);
                items.push(item);
            }
        }
    }
    items
}

fn oracle_review(task: TaskSpec, cm: &ConfusionMatrix) -> Result<(usize, ConfusionMatrix, f64), String> {
    let err = |e: tonguescreen_core::Error| e.to_string();
    let items = items_for(task, cm);
    let flagged = flag_for_review(task, &items, None).map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = ReviewStore::create(&dir.path().join("store.jsonl"), task).map_err(err)?;
    store.load_evaluation("oracle", Some(cm.clone()), flagged.clone()).map_err(err)?;
    for f in &flagged {
        let truth = f.target.expect("evaluation items carry targets");
        store.submit_label(&f.id, truth.code(), "oracle", f.revision, true).map_err(err)?;
    }
    let report = store.state().map_err(err)?.report();
    let ens = report.ensemble_confusion.ok_or("ensemble matrix unavailable")?;
    Ok((flagged.len(), ens, report.ensemble_accuracy.unwrap_or(f64::NAN)))
}

fn oracle_ensemble() -> Outcome {
    let (nb, eb, ab) = oracle_review(TaskSpec::BINARY, &binary_matrix())?;
    let (nm, em, am) = oracle_review(TaskSpec::MULTICLASS, &multiclass_matrix())?;
    check(
        nb == 1 && nm == 2 && eb.is_diagonal() && em.is_diagonal() && ab == 1.0 && am == 1.0,
        format!("binary: {nb} flagged, accuracy {ab}; multiclass: {nm} flagged, accuracy {am}"),
    )
}

/// Mann-Whitney pair statistic: P(score_pos > score_neg) + 0.5 P(tie).
fn pair_statistic(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn random_instance(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(2..=500);
    // Coarse score grids force ties.
    let levels = *[5u32, 20, 100, 1_000_000].get(r.random_range(0..4)).unwrap();
    let mut positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    positive[0] = true;
    positive[1] = false;
    let scores = (0..n).map(|_| r.random_range(0..=levels) as f64 / levels as f64).collect();
    (scores, positive)
}

const ROC_INSTANCES: u64 = 1000;

fn auc_matches_pair_statistic() -> Outcome {
    let start = Instant::now();
    let worst = Exec::Parallel.map_range(ROC_INSTANCES as usize, |k| {
        let (s, p) = random_instance(k as u64);
        match roc_binary(&s, &p) {
            Ok(c) => (c.auc - pair_statistic(&s, &p)).abs(),
            Err(_) => f64::INFINITY,
        }
    });
    let worst = worst.into_iter().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    check(
        worst <= 1e-9 && elapsed <= Duration::from_secs(30),
        format!("{ROC_INSTANCES} instances, max |AUC - pair statistic| = {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn roc_shape() -> Outcome {
    let bad = Exec::Parallel.map_range(ROC_INSTANCES as usize, |k| {
        let (s, p) = random_instance(k as u64);
        let Ok(c) = roc_binary(&s, &p) else { return true };
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        let monotone = c.points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        !(monotone
            && (first.fpr, first.tpr) == (0.0, 0.0)
            && (last.fpr, last.tpr) == (1.0, 1.0)
            && (0.0..=1.0).contains(&c.auc))
    });
    let n_bad = bad.iter().filter(|b| **b).count();
    check(n_bad == 0, format!("{n_bad} of {ROC_INSTANCES} curves malformed"))
}

fn synthetic_manifest(task: TaskSpec, per_class: usize) -> DatasetManifest {
    let lesions: Vec<LesionClass> = match task.kind {
        TaskKind::Binary => vec![LesionClass::FissuredTongue, LesionClass::Leukoplakia],
        TaskKind::Multiclass => task
            .classes()
            .iter()
            .map(|c| match c {
                TaskClass::Lesion(l) => *l,
                TaskClass::Risk(_) => unreachable!(),
            })
            .collect(),
    };
    let records = lesions
        .iter()
        .flat_map(|l| {
            (0..per_class).map(move |i| {
                let id = format!("{}{i:03}", l.code());
                ImageRecord::new(&id, format!("images/{id}.png"), *l, 640, 480, None, "")
            })
        })
        .collect();
    DatasetManifest::new(task, records).unwrap()
}

fn per_class_counts(m: &DatasetManifest, ids: &[String]) -> Vec<usize> {
    m.task
        .classes()
        .iter()
        .map(|c| ids.iter().filter(|id| m.label_of(m.get(id).unwrap()) == *c).count())
        .collect()
}

fn splits() -> Outcome {
    let b = synthetic_manifest(TaskSpec::BINARY, 100);
    let m = synthetic_manifest(TaskSpec::MULTICLASS, 60);
    let sb = balanced_split(&b, 42).map_err(|e| e.to_string())?;
    let sm = balanced_split(&m, 42).map_err(|e| e.to_string())?;
    let same = balanced_split(&b, 42).map_err(|e| e.to_string())? == sb
        && balanced_split(&m, 42).map_err(|e| e.to_string())? == sm;
    let differs = balanced_split(&b, 43).map_err(|e| e.to_string())? != sb;
    let tb = per_class_counts(&b, &sb.train_ids);
    let vb = per_class_counts(&b, &sb.validation_ids);
    let tm = per_class_counts(&m, &sm.train_ids);
    let vm = per_class_counts(&m, &sm.validation_ids);
    check(
        (sb.train_ids.len(), sb.validation_ids.len()) == (160, 40)
            && tb == [80, 80]
            && vb == [20, 20]
            && (sm.train_ids.len(), sm.validation_ids.len()) == (240, 60)
            && tm.iter().all(|n| *n == 48)
            && vm.iter().all(|n| *n == 12)
            && same
            && differs,
        format!(
            "binary {}/{} per class {tb:?}/{vb:?}; multiclass {}/{} per class {tm:?}/{vm:?}; reproducible {same}",
            sb.train_ids.len(),
            sb.validation_ids.len(),
            sm.train_ids.len(),
            sm.validation_ids.len()
        ),
    )
}

fn smoke_data() -> (DatasetManifest, tonguescreen_core::trainer::LabeledImages) {
    common::separable_set(50, BackboneSpec::smallest().input.width, 40, 7)
}

fn augmentation(smoke: &TrainedModel, split: &SplitSpec) -> Outcome {
    let policy = AugmentPolicy::default();
    let (mut h, mut v) = (0u32, 0u32);
    for k in 0..10_000 {
        let f = policy.draw(&mut presentation_rng(11, k / 100, &format!("img{}", k % 100)));
        h += f.horizontal as u32;
        v += f.vertical as u32;
    }
    let band = 4850..=5150;

    let mut r = ChaCha8Rng::seed_from_u64(5);
    let img = RgbImage::from_fn(37, 23, |_, _| Rgb([r.random(), r.random(), r.random()]));
    let involution = [Flips { horizontal: true, vertical: false }, Flips { horizontal: false, vertical: true }, Flips { horizontal: true, vertical: true }]
        .iter()
        .all(|f| f.apply(&f.apply(&img)).as_raw() == img.as_raw());

    let instr = &smoke.instrumentation;
    let leaked = split.validation_ids.iter().filter(|id| instr.train_presentations.contains_key(*id)).count();
    check(
        band.contains(&h) && band.contains(&v) && involution && instr.validation_augmented == 0 && leaked == 0,
        format!(
            "flips over 10000 presentations: horizontal {h}, vertical {v}; involution exact {involution}; \
             validation augmentations {} over {} validation presentations",
            instr.validation_augmented, instr.validation_presentations
        ),
    )
}

fn transfer_contract() -> Outcome {
    let spec = BackboneName::AlexNet.spec();
    let ckpt = ReferenceProvider.load(&spec).map_err(|e| e.to_string())?;
    let handle = build_model(&ReferenceProvider, &spec, TaskSpec::MULTICLASS, 3).map_err(|e| e.to_string())?;
    let transferred: Vec<_> = handle.network.params.iter().filter(|p| p.group == ParamGroup::Transferred).collect();
    let bit_equal = transferred.len() == ckpt.body.len()
        && transferred.iter().zip(&ckpt.body).all(|(a, b)| {
            a.shape == b.shape && a.data.iter().map(|x| x.to_bits()).eq(b.data.iter().map(|x| x.to_bits()))
        });

    let cfg = TrainConfig::default();
    let mut net = handle.network.clone();
    let before = net.clone();
    let mut opt = SgdMomentum::new(&net, cfg.global_lr as f32, cfg.momentum as f32, cfg.head_lr_factor as f32);
    let grads: Vec<Vec<f32>> = net.params.iter().map(|p| vec![0.5; p.data.len()]).collect();
    opt.step(&mut net, &grads);
    let mean_step = |group: ParamGroup| {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (a, b) in net.params.iter().zip(&before.params).filter(|(p, _)| p.group == group) {
            for (x, y) in a.data.iter().zip(&b.data) {
                sum += (x - y).abs() as f64;
                n += 1;
            }
        }
        sum / n as f64
    };
    let ratio = mean_step(ParamGroup::Head) / mean_step(ParamGroup::Transferred);
    check(
        bit_equal && (ratio - 20.0).abs() <= 1.0,
        format!("transferred tensors bit-equal {bit_equal}; head/body step ratio {ratio:.3}"),
    )
}

fn smoke_training(model: &TrainedModel, elapsed: Duration) -> Outcome {
    let accs: Vec<f64> = model.curve.validation.iter().map(|v| v.accuracy).collect();
    let epoch_loss = model.curve.epoch_mean_loss();
    let non_increasing = epoch_loss.windows(2).all(|w| w[1] <= w[0]);
    let reached = accs.iter().position(|a| *a >= 0.95);
    check(
        reached.is_some() && non_increasing && accs.len() <= 15 && elapsed <= Duration::from_secs(600),
        format!(
            "best validation accuracy {:.2} (first >= 0.95 at epoch {}); epoch-mean loss {:.3} -> {:.3}, non-increasing {non_increasing}; {:.1}s",
            accs.iter().copied().fold(0.0, f64::max),
            reached.map(|e| (e + 1).to_string()).unwrap_or_else(|| "never".into()),
            epoch_loss.first().copied().unwrap_or(f64::NAN),
            epoch_loss.last().copied().unwrap_or(f64::NAN),
            elapsed.as_secs_f64()
        ),
    )
}

fn parse_cell(cell: &str) -> Option<(f64, f64)> {
    let (m, s) = cell.split_once(" ± ")?;
    Some((m.parse().ok()?, s.parse().ok()?))
}

fn table_emitter() -> Outcome {
    let (manifest, images) = common::separable_set(25, BackboneSpec::smallest().input.width, 40, 3);
    let spec = BackboneSpec::smallest();
    let cfg = TrainConfig { epochs: 10, num_runs: 5, ..Default::default() };
    let runs = repeat_runs(&ReferenceProvider, &manifest, &images, 100, &spec, TaskSpec::BINARY, &cfg, Exec::Parallel)
        .map_err(|e| e.to_string())?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    let agg = aggregate(&reports).map_err(|e| e.to_string())?;
    let table = format_table(TaskKind::Binary, std::slice::from_ref(&agg));
    let lines: Vec<&str> = table.lines().collect();
    let cells: Vec<&str> = lines.get(1).map(|l| l.split('\t').collect()).unwrap_or_default();

    // Independent mean and sample standard deviation.
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let t_mean = reports.iter().map(|r| r.train_seconds).sum::<f64>() / 5.0;
    let shown = cells.get(1).and_then(|c| parse_cell(c));
    let layout_ok = lines.first() == Some(&"Model\tA_CC\tS_ENS\tS_PEC\tT_SEC") && cells.len() == 5;
    let values_ok = shown.is_some_and(|(m, s)| (m - mean).abs() <= 0.005 + 1e-12 && (s - std).abs() <= 0.005 + 1e-12)
        && cells.get(4).and_then(|c| c.parse::<f64>().ok()).is_some_and(|t| (t - t_mean).abs() <= 0.005 + 1e-12);
    let seeds: Vec<u64> = runs.iter().map(|r| r.report.run_seed).collect();

    let same = vec![reports[0].clone(); 5];
    let agg_same = aggregate(&same).map_err(|e| e.to_string())?;
    let same_row = format_table(TaskKind::Binary, &[agg_same.clone()]);
    let zero_std = agg_same.accuracy.std == Some(0.0) && same_row.contains("± 0.00");

    // Known spread: accuracies 0.90, 0.95, 1.00, 0.85, 0.90 give 0.92 ± 0.057.
    let spread: Vec<MetricsReport> = [0.90, 0.95, 1.00, 0.85, 0.90]
        .iter()
        .map(|a| MetricsReport { accuracy: *a, ..reports[0].clone() })
        .collect();
    let spread_row = format_table(TaskKind::Binary, &[aggregate(&spread).map_err(|e| e.to_string())?]);
    let spread_ok = spread_row.lines().nth(1).and_then(|l| l.split('\t').nth(1)) == Some("0.92 ± 0.06");

    let mc = format_table(TaskKind::Multiclass, &[]);
    check(
        layout_ok && values_ok && zero_std && spread_ok && seeds == [100, 101, 102, 103, 104] && mc.starts_with("Model\tA_CC\tT_SEC"),
        format!(
            "row '{}'; oracle accuracy {mean:.4} ± {std:.4}; fixed spread renders {spread_ok}; identical runs std {:?}",
            lines.get(1).unwrap_or(&""),
            agg_same.accuracy.std
        ),
    )
}

fn main() -> ExitCode {
    let (manifest, images) = smoke_data();
    let spec = BackboneSpec::smallest();
    let split = balanced_split(&manifest, 7).expect("balanced synthetic set");
    let start = Instant::now();
    let smoke = build_model(&ReferenceProvider, &spec, TaskSpec::BINARY, 7)
        .and_then(|h| train(h, &images, &split, &TrainConfig { seed: 7, ..Default::default() }, Exec::Parallel));
    let elapsed = start.elapsed();

    let smoke_outcome = |f: &dyn Fn(&TrainedModel) -> Outcome| match &smoke {
        Ok(m) => f(m),
        Err(e) => Err(format!("training failed: {e}")),
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("binary confusion metrics", binary_metrics()),
        ("multiclass accuracy", multiclass_accuracy()),
        ("oracle physician ensemble", oracle_ensemble()),
        ("AUC equals pair statistic", auc_matches_pair_statistic()),
        ("ROC curve shape", roc_shape()),
        ("balanced deterministic splits", splits()),
        ("train-only flip augmentation", smoke_outcome(&|m| augmentation(m, &split))),
        ("transfer-learning contract", transfer_contract()),
        ("smallest-backbone smoke training", smoke_outcome(&|m| smoke_training(m, elapsed))),
        ("multi-run table emitter", table_emitter()),
    ];

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
