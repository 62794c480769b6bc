use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::json;

use tonguescreen_core::metrics::confusion;
use tonguescreen_core::render;
use tonguescreen_core::triage::{
    flag_for_review, ItemStatus, ReviewReport, ReviewStore, ScoredItem, DEFAULT_CONFIDENCE_THRESHOLD,
};
use tonguescreen_core::TaskSpec;
use tonguescreen_review::ServiceConfig;

use crate::layout::{ModelRef, RunDir};
use crate::pipeline::read_predictions;
use crate::{Global, Outcome};

pub fn flag(g: &Global, r: &ModelRef, deployment: bool, threshold: Option<f64>, force: bool) -> anyhow::Result<Outcome> {
    let run = g.run();
    let task = TaskSpec::new(r.task);
    let mut items = read_predictions(&run, r)?;
    let deployment = deployment || threshold.is_some();
    let (base, threshold) = if deployment {
        for i in &mut items {
            i.target = None;
        }
        (None, Some(threshold.unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD)))
    } else {
        (Some(base_confusion(task, &items)?), None)
    };
    let flagged = flag_for_review(task, &items, threshold)?;
    let slug = r.slug();

    let path = run.store();
    let store = if path.exists() {
        let store = ReviewStore::open(&path)?;
        let state = store.state()?;
        if state.task != task {
            bail!(
                "{} holds a {} review; move it aside to review {} predictions",
                path.display(),
                state.task,
                task
            );
        }
        let current: Vec<_> = state.items().into_iter().cloned().collect();
        if state.backbone.as_deref() == Some(slug.as_str()) && state.base_confusion == base && current == flagged {
            return Ok(summary("queue unchanged", &slug, &flagged, threshold));
        }
        let labeled = current.iter().filter(|i| i.status == ItemStatus::Labeled).count();
        if labeled > 0 && !force {
            bail!(
                "the current queue holds {labeled} physician label(s); pass --force to start a new one (earlier labels stay in the audit log)"
            );
        }
        store
    } else {
        ReviewStore::create(&path, task)?
    };
    store.load_evaluation(&slug, base, flagged.clone())?;
    Ok(summary("queued", &slug, &flagged, threshold))
}

fn base_confusion(task: TaskSpec, items: &[ScoredItem]) -> anyhow::Result<tonguescreen_core::metrics::ConfusionMatrix> {
    let preds: Vec<_> = items.iter().map(|i| i.prediction).collect();
    let targets = items
        .iter()
        .map(|i| i.target.with_context(|| format!("prediction '{}' has no reference label; use --deployment", i.id)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(confusion(&preds, &targets, task.classes())?)
}

fn summary(status: &str, slug: &str, flagged: &[tonguescreen_core::triage::ReviewItem], threshold: Option<f64>) -> Outcome {
    let ids: Vec<&str> = flagged.iter().map(|f| f.id.as_str()).collect();
    let mode = match threshold {
        Some(t) => format!("confidence below {t}"),
        None => "known misclassification".into(),
    };
    let mut text = format!("{status}: {} item(s) from {slug} flagged by {mode}\n", ids.len());
    for id in &ids {
        let _ = writeln!(text, "  {id}");
    }
    Outcome::new(text, json!({ "status": status, "model": slug, "threshold": threshold, "flagged": ids }))
}

fn open_loaded(run: &RunDir) -> anyhow::Result<ReviewStore> {
    run.require(&run.store(), "flag")?;
    let store = ReviewStore::open(&run.store())?;
    if !store.state()?.is_loaded() {
        bail!("{} holds no evaluation; run `tonguescreen flag` first", run.store().display());
    }
    Ok(store)
}

pub fn export(g: &Global, out: &Path, blind: bool) -> anyhow::Result<Outcome> {
    let run = g.run();
    let store = open_loaded(&run)?;
    let out = run.resolve(out);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let n = store.export_queue(&out, blind)?;
    Ok(Outcome::new(
        format!("exported {n} pending item(s) to {}{}", out.display(), if blind { "" } else { " (unblinded)" }),
        json!({ "path": out, "items": n, "blind": blind }),
    ))
}

pub fn import(g: &Global, labels: &Path, blind: bool) -> anyhow::Result<Outcome> {
    let run = g.run();
    let store = open_loaded(&run)?;
    let path = run.resolve(labels);
    let decisions = store.import_labels(&path, blind).with_context(|| format!("importing {}", path.display()))?;
    let report = store.state()?.report();
    let mut text = format!("imported {} label(s)\n", decisions.len());
    text.push_str(&describe(&report));
    Ok(Outcome::new(text, json!({ "imported": decisions, "report": report })))
}

pub fn serve(
    g: &Global,
    bind: SocketAddr,
    token: Option<String>,
    ui: Option<PathBuf>,
    blind: bool,
) -> anyhow::Result<Outcome> {
    let run = g.run();
    run.require(&run.store(), "flag")?;
    let mut config = ServiceConfig::new(run.store(), run.root());
    config.bind = bind;
    config.blind_mode = blind;
    config.token = token;
    config.ui_dir = ui.map(|p| run.resolve(&p));
    eprintln!("serving review API on http://{bind} (ctrl-c to stop)");
    tokio::runtime::Runtime::new()?.block_on(tonguescreen_review::serve(config))?;
    Ok(Outcome::new("stopped", json!({ "stopped": true })))
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2} %", 100.0 * v)).unwrap_or_else(|| "-".into())
}

fn describe(r: &ReviewReport) -> String {
    if !r.loaded {
        return "no evaluation loaded; run `tonguescreen flag` first\n".into();
    }
    let mut s = String::new();
    let _ = writeln!(s, "model: {}", r.backbone.as_deref().unwrap_or("-"));
    let _ = writeln!(s, "flagged: {}, labeled: {}, pending: {}", r.flagged, r.labeled, r.pending);
    let _ = writeln!(s, "base accuracy: {}", pct(r.base_accuracy));
    if r.complete {
        let _ = writeln!(s, "ensemble accuracy: {}", pct(r.ensemble_accuracy));
    } else {
        let _ = writeln!(s, "ensemble accuracy: {} (settled items only)", pct(r.ensemble_accuracy));
    }
    if let Some(cm) = &r.ensemble_confusion {
        let _ = write!(s, "\nensemble confusion matrix\n{}", cm.render());
    }
    s
}

pub fn report(g: &Global) -> anyhow::Result<Outcome> {
    let run = g.run();
    let path = run.store();
    if !path.exists() {
        return Ok(Outcome::new(
            "no review store yet; run `tonguescreen flag` first",
            json!({ "loaded": false }),
        ));
    }
    let report = ReviewStore::open(&path)?.state()?.report();
    let mut text = describe(&report);
    if report.loaded {
        fs::create_dir_all(run.reports())?;
        fs::write(run.reports().join("review.json"), serde_json::to_vec_pretty(&report)?)?;
        if let Some(base) = report.base_accuracy {
            let ensemble = if report.complete { report.ensemble_accuracy } else { None };
            let title = format!("{} {}", report.backbone.as_deref().unwrap_or(""), report.task).to_ascii_uppercase();
            render::accuracy_bars(base, ensemble, &title).save(run.reports().join("bars.png"))?;
        }
        if report.pending > 0 {
            eprintln!("warning: pending: {}", report.pending);
            let _ = writeln!(text, "warning: pending: {}", report.pending);
        }
    }
    Ok(Outcome::new(text, serde_json::to_value(&report)?))
}
