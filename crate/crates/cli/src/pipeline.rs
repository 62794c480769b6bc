use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::json;

use tonguescreen_core::backbone::{BackboneName, BackboneSpec};
use tonguescreen_core::dataset::{
    balanced_split_with, ingest as ingest_images, read_annotations, roi_path, DatasetManifest, ImageRecord,
    IngestOptions, SplitSpec,
};
use tonguescreen_core::metrics::{aggregate, format_row, format_table, predicted_index, AggregateReport, MetricsReport};
use tonguescreen_core::provider::{DirectoryProvider, PretrainedProvider, ReferenceProvider};
use tonguescreen_core::render;
use tonguescreen_core::trainer::{
    build_model, evaluate_validation, predict as predict_image, score_ids, train as train_model, LabeledImages,
    TrainConfig, TrainedModel,
};
use tonguescreen_core::triage::ScoredItem;
use tonguescreen_core::{LesionClass, TaskKind, TaskSpec};

use crate::layout::{ModelRef, RunDir};
use crate::{Global, Outcome};

pub fn ingest(
    g: &Global,
    images: &Path,
    labels: &Path,
    task: TaskKind,
    exclude: &[String],
    force: bool,
) -> anyhow::Result<Outcome> {
    let run = g.run();
    if run.manifest().exists() && !force {
        bail!("{} already exists; pass --force to re-ingest", run.manifest().display());
    }
    let exclude = exclude
        .iter()
        .map(|c| c.parse::<LesionClass>())
        .collect::<Result<Vec<_>, _>>()?;
    let annotations = read_annotations(labels).with_context(|| format!("reading {}", labels.display()))?;
    let mut opts = IngestOptions::new(TaskSpec::new(task), run.root());
    opts.exclude = exclude;
    opts.exec = g.exec();
    let manifest = ingest_images(images, &annotations, &opts)?;
    manifest.write(&run.manifest())?;

    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    for r in &manifest.records {
        *per_class.entry(manifest.label_of(r).code().to_string()).or_default() += 1;
    }
    let mut text = format!("ingested {} image(s) for the {task} task\n", manifest.len());
    for (c, n) in &per_class {
        let _ = writeln!(text, "  {c}: {n}");
    }
    Ok(Outcome::new(
        text,
        json!({ "task": task, "records": manifest.len(), "per_class": per_class, "checksum": manifest.checksum }),
    ))
}

pub fn split(g: &Global, train_fraction: f64, force: bool) -> anyhow::Result<Outcome> {
    let run = g.run();
    run.require(&run.manifest(), "ingest")?;
    let manifest = DatasetManifest::read(&run.manifest())?;
    let split = balanced_split_with(&manifest, g.seed.unwrap_or(0), train_fraction)?;
    let path = run.split();
    let status = if path.exists() {
        if SplitSpec::read(&path)? == split {
            "unchanged"
        } else if force {
            "replaced"
        } else {
            bail!("{} already holds a different split; pass --force to replace it", path.display());
        }
    } else {
        "written"
    };
    if status != "unchanged" {
        split.write(&path)?;
    }
    Ok(Outcome::new(
        format!(
            "split {status}: {} training, {} validation (seed {})",
            split.train_ids.len(),
            split.validation_ids.len(),
            split.seed
        ),
        json!({ "status": status, "seed": split.seed, "train": split.train_ids.len(), "validation": split.validation_ids.len() }),
    ))
}

/// Checkpoints placed in `<run>/weights` win over the built-in reference.
fn provider_for(run: &RunDir, spec: &BackboneSpec) -> Box<dyn PretrainedProvider> {
    let dir = DirectoryProvider::new(run.weights());
    if dir.path_for(spec).exists() {
        Box::new(dir)
    } else {
        Box::new(ReferenceProvider)
    }
}

pub fn train(
    g: &Global,
    backbone: &str,
    task: TaskKind,
    config: Option<&Path>,
    runs: Option<usize>,
    force: bool,
) -> anyhow::Result<Outcome> {
    let spec = BackboneSpec::lookup(backbone)?;
    let run = g.run();
    run.require(&run.manifest(), "ingest")?;
    run.require(&run.split(), "split")?;
    let manifest = DatasetManifest::read(&run.manifest())?;
    if manifest.task.kind != task {
        bail!(
            "this run directory was ingested for the {} task; ingest into a separate run directory to train for {task}",
            manifest.task
        );
    }
    let split = SplitSpec::read(&run.split())?;
    if split.manifest_checksum != manifest.checksum {
        bail!("split.json was drawn from a different manifest; run `split --force`");
    }
    let mut config = match config {
        Some(p) => TrainConfig::read(&run.resolve(p)).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(n) = runs {
        config.num_runs = n;
    }
    if config.num_runs == 0 {
        bail!("--runs must be at least 1");
    }

    let family = run.family(spec.name, task);
    if family.exists() {
        if !force {
            bail!("{} already holds trained runs; pass --force to retrain", family.display());
        }
        fs::remove_dir_all(&family)?;
    }
    fs::create_dir_all(&family)?;
    fs::write(family.join("config.toml"), config.to_toml())?;

    let provider = provider_for(&run, &spec);
    let exec = g.exec();
    let images = LabeledImages::from_manifest(&manifest, run.root(), &spec, exec)?;
    let base_seed = g.seed.unwrap_or(split.seed);
    let mut reports = Vec::new();
    let mut text = String::new();
    for k in 0..config.num_runs {
        let seed = base_seed + k as u64;
        let run_split = if seed == split.seed {
            split.clone()
        } else {
            balanced_split_with(&manifest, seed, split.train_fraction)?
        };
        let handle = build_model(provider.as_ref(), &spec, manifest.task, seed)?;
        let run_config = TrainConfig { seed, ..config.clone() };
        let mut model = train_model(handle, &images, &run_split, &run_config, exec)?;
        let report = evaluate_validation(&model, &images, &run_split, exec)?;

        let dir = run.model(&ModelRef { backbone: spec.name, task, run: k });
        model.save(&dir)?;
        run_split.write(&dir.join("split.json"))?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        let title = format!("{} {} RUN {k}", spec.name, task);
        render::training_plot(&model.curve, &title).save(dir.join("curve.png"))?;
        log::info!("{} run {k}: accuracy {:.4}", spec.name, report.accuracy);
        let _ = writeln!(
            text,
            "run {k} (seed {seed}): A_CC {:.4}, {:.1} s",
            report.accuracy, report.train_seconds
        );
        reports.push(report);
    }

    let agg = aggregate(&reports)?;
    fs::write(family.join("aggregate.json"), serde_json::to_vec_pretty(&agg)?)?;
    let table = write_table(&run, task)?;
    let _ = writeln!(text, "\n{}", table.lines().next().unwrap_or_default());
    let _ = writeln!(text, "{}", format_row(&agg));
    Ok(Outcome::new(
        text,
        json!({ "provider": provider.name(), "runs": reports, "aggregate": agg, "table": table }),
    ))
}

/// Rebuilds `reports/table-<task>.tsv` from every trained backbone.
fn write_table(run: &RunDir, task: TaskKind) -> anyhow::Result<String> {
    let mut rows: Vec<AggregateReport> = Vec::new();
    for name in BackboneName::ALL {
        let path = run.family(name, task).join("aggregate.json");
        if path.exists() {
            rows.push(serde_json::from_slice(&fs::read(&path)?)?);
        }
    }
    let table = format_table(task, &rows);
    fs::create_dir_all(run.reports())?;
    fs::write(run.reports().join(format!("table-{task}.tsv")), &table)?;
    Ok(table)
}

pub fn load_model(run: &RunDir, r: &ModelRef) -> anyhow::Result<TrainedModel> {
    let dir = run.model(r);
    if !dir.join(TrainedModel::SIDECAR_FILE).exists() {
        bail!(
            "no trained model {r} in {}; run `tonguescreen train --backbone {} --task {}` first",
            run.root().display(),
            r.backbone,
            r.task
        );
    }
    Ok(TrainedModel::load(&dir)?)
}

/// The image a reviewer should see: the ROI crop when ingest stored one.
fn review_image(run: &RunDir, record: &ImageRecord) -> String {
    if record.roi.is_some() {
        let crop = roi_path(Path::new(&record.path));
        if run.root().join(&crop).exists() {
            return crop.to_string_lossy().replace('\\', "/");
        }
    }
    record.path.clone()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

pub fn evaluate(g: &Global, r: &ModelRef) -> anyhow::Result<Outcome> {
    let run = g.run();
    let model = load_model(&run, r)?;
    let split = SplitSpec::read(&run.model(r).join("split.json"))?;
    run.require(&run.manifest(), "ingest")?;
    let manifest = DatasetManifest::read(&run.manifest())?;
    let records = split
        .validation_ids
        .iter()
        .map(|id| manifest.get(id).cloned().with_context(|| format!("validation id '{id}' is not in the manifest")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let validation = DatasetManifest::new(manifest.task, records)?;
    let exec = g.exec();
    let images = LabeledImages::from_manifest(&validation, run.root(), &model.backbone, exec)?;
    let (scores, targets) = score_ids(&model, &images, &split.validation_ids, exec)?;
    let report = MetricsReport::evaluate(
        model.backbone.name.as_str(),
        model.task,
        model.split_seed,
        model.train_seconds,
        &scores,
        &targets,
    )?;

    let dir = run.eval(r);
    fs::create_dir_all(&dir)?;
    let mut lines = String::new();
    for ((record, s), t) in validation.records.iter().zip(&scores).zip(&targets) {
        let item = ScoredItem::new(model.task, &record.id, review_image(&run, record), s.clone()).with_target(*t);
        lines.push_str(&serde_json::to_string(&item)?);
        lines.push('\n');
    }
    fs::write(dir.join("predictions.jsonl"), lines)?;
    let grid = report.confusion.render();
    fs::write(dir.join("confusion.txt"), &grid)?;
    fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;

    let text = format!(
        "{r} on {} validation image(s)\n\n{grid}\nA_CC {:.4}  S_ENS {}  S_PEC {}  AUC {}\n",
        targets.len(),
        report.accuracy,
        fmt_opt(report.sensitivity),
        fmt_opt(report.specificity),
        fmt_opt(report.auc)
    );
    Ok(Outcome::new(text, serde_json::to_value(&report)?))
}

pub fn read_predictions(run: &RunDir, r: &ModelRef) -> anyhow::Result<Vec<ScoredItem>> {
    let path = run.eval(r).join("predictions.jsonl");
    if !path.exists() {
        bail!("{} not found; run `tonguescreen evaluate --model {r}` first", path.display());
    }
    fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

pub fn roc(g: &Global, r: &ModelRef) -> anyhow::Result<Outcome> {
    let run = g.run();
    let items = read_predictions(&run, r)?;
    let task = TaskSpec::new(r.task);
    let positive = task.positive_class();
    let idx = task.index_of(positive).expect("positive class belongs to its task");
    let mut scores = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    for i in &items {
        let t = i.target.with_context(|| format!("prediction '{}' has no reference label", i.id))?;
        scores.push(i.scores[idx].clamp(0.0, 1.0));
        targets.push(t);
    }
    let curve = tonguescreen_core::metrics::roc(&scores, &targets, positive)?;
    let dir = run.eval(r);
    fs::write(dir.join("roc.csv"), curve.to_csv())?;
    let title = format!("{} {}", r.backbone, r.task).to_ascii_uppercase();
    render::roc_plot(&curve, &title).save(dir.join("roc.png"))?;
    Ok(Outcome::new(
        format!("{r}: AUC {:.4} ({} vs rest, {} point(s))", curve.auc, positive, curve.points.len()),
        json!({ "model": r.to_string(), "positive": positive, "auc": curve.auc, "points": curve.points.len() }),
    ))
}

pub fn predict(g: &Global, r: &ModelRef, images: &[PathBuf], overlay: bool) -> anyhow::Result<Outcome> {
    let run = g.run();
    let model = load_model(&run, r)?;
    let classes = model.task.classes();
    if overlay {
        fs::create_dir_all(run.overlays())?;
    }
    let mut text = String::new();
    let mut results = Vec::new();
    let mut failures = 0;
    for path in images {
        let outcome = (|| -> anyhow::Result<serde_json::Value> {
            let img = image::open(path).with_context(|| format!("cannot decode {}", path.display()))?;
            let scores = predict_image(&model, &img)?;
            let class = classes[predicted_index(model.task, &scores)];
            let p = scores[model.task.index_of(class).expect("predicted class belongs to the task")];
            let mut written = None;
            if overlay {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let out = run.overlays().join(format!("{stem}_{}.png", r.slug()));
                render::overlay_prediction(&img.to_rgb8(), class.display_name(), p).save(&out)?;
                written = Some(out);
            }
            let listed: Vec<String> = classes.iter().zip(&scores).map(|(c, s)| format!("{c}={s:.4}")).collect();
            let _ = writeln!(text, "{}\t{class}\t{}", path.display(), listed.join(" "));
            Ok(json!({ "path": path, "class": class, "scores": scores, "overlay": written }))
        })();
        match outcome {
            Ok(v) => results.push(v),
            Err(e) => {
                eprintln!("error: {e:#}");
                failures += 1;
                results.push(json!({ "path": path, "error": format!("{e:#}") }));
            }
        }
    }
    if failures > 0 {
        let _ = writeln!(text, "{failures} of {} image(s) failed", images.len());
    }
    let mut out = Outcome::new(text, json!({ "model": r.to_string(), "results": results, "failed": failures }));
    out.failures = failures;
    Ok(out)
}

pub fn export_weights(g: &Global, backbone: &str, force: bool) -> anyhow::Result<Outcome> {
    let spec = BackboneSpec::lookup(backbone)?;
    let run = g.run();
    let provider = DirectoryProvider::new(run.weights());
    let path = provider.path_for(&spec);
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    fs::create_dir_all(run.weights())?;
    ReferenceProvider::checkpoint(&spec).save(&path)?;
    Ok(Outcome::new(
        format!("wrote {} checkpoint to {}", spec.name, path.display()),
        json!({ "backbone": spec.name, "path": path }),
    ))
}
