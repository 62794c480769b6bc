use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::Value;

fn tonguescreen(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tonguescreen"))
        .arg("--run-dir")
        .arg(run)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(run: &Path, args: &[&str]) -> String {
    let out = tonguescreen(run, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn ok_json(run: &Path, args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    serde_json::from_str(&ok(run, &all)).unwrap()
}

fn fails(run: &Path, args: &[&str]) -> String {
    let out = tonguescreen(run, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// Hand-written evaluation of a binary model: four correct, "p2" and "b2"
/// wrong.
fn seed_predictions(run: &Path) {
    let rows = [
        ("b0", 0.9, "benign"),
        ("b1", 0.8, "benign"),
        ("b2", 0.3, "benign"),
        ("p0", 0.1, "pre_cancerous"),
        ("p1", 0.2, "pre_cancerous"),
        ("p2", 0.6, "pre_cancerous"),
    ];
    let dir = run.join("eval/squeezenet-binary-run-0");
    fs::create_dir_all(&dir).unwrap();
    let lines: String = rows
        .iter()
        .map(|(id, benign, target)| {
            let pred = if *benign >= 0.5 { "benign" } else { "pre_cancerous" };
            format!(
                "{{\"id\":\"{id}\",\"image_path\":\"images/{id}_roi.png\",\"scores\":[{benign},{}],\"prediction\":\"{pred}\",\"target\":\"{target}\"}}\n",
                1.0 - benign
            )
        })
        .collect();
    fs::write(dir.join("predictions.jsonl"), lines).unwrap();
}

fn queue_ids(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn review_round_trip_on_recorded_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path();
    seed_predictions(run);
    let model = ["--model", "SqueezeNet-binary"];

    let roc = ok_json(run, &["roc", model[0], model[1]]);
    assert!((roc["auc"].as_f64().unwrap() - 8.0 / 9.0).abs() < 1e-12);
    assert!(run.join("eval/squeezenet-binary-run-0/roc.png").exists());

    let empty = ok_json(run, &["report"]);
    assert_eq!(empty["loaded"], false);

    let flagged = ok_json(run, &["flag", model[0], model[1]]);
    assert_eq!(flagged["flagged"], serde_json::json!(["b2", "p2"]));
    let again = ok_json(run, &["flag", model[0], model[1]]);
    assert_eq!(again["status"], "queue unchanged");

    let out = tonguescreen(run, &["report"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pending: 2"));

    ok(run, &["review", "export"]);
    let queue = run.join("review/queue.jsonl");
    assert_eq!(queue_ids(&queue), ["b2", "p2"]);
    assert!(!fs::read_to_string(&queue).unwrap().contains("\"ai_"));

    let labels = run.join("review/labels.jsonl");
    fs::write(&labels, "{\"item_id\":\"b2\",\"label\":\"ZZ\",\"revision\":0}\n{\"item_id\":\"p2\",\"label\":\"XX\",\"revision\":0}\n").unwrap();
    let err = fails(run, &["review", "import", "--labels", "review/labels.jsonl"]);
    assert!(err.contains("b2=ZZ") && err.contains("p2=XX"), "{err}");
    fs::write(&labels, "{\"item_id\":\"nope\",\"label\":\"benign\",\"revision\":0}\n").unwrap();
    assert!(fails(run, &["review", "import", "--labels", "review/labels.jsonl"]).contains("nope"));

    fs::write(
        &labels,
        "{\"item_id\":\"b2\",\"label\":\"benign\",\"reviewer\":\"dr\",\"revision\":0}\n{\"item_id\":\"p2\",\"label\":\"pre_cancerous\",\"reviewer\":\"dr\",\"revision\":0}\n",
    )
    .unwrap();
    let imported = ok_json(run, &["review", "import", "--labels", "review/labels.jsonl"]);
    assert_eq!(imported["report"]["ensemble_accuracy"], 1.0);
    assert_eq!(imported["imported"][0]["source"], "physician");

    let report = ok_json(run, &["report"]);
    assert_eq!((report["base_accuracy"].as_f64(), report["ensemble_accuracy"].as_f64()), (Some(4.0 / 6.0), Some(1.0)));
    assert_eq!(report["pending"], 0);
    assert!(run.join("reports/bars.png").exists());

    // The queue now holds physician labels; replacing it needs --force.
    assert!(fails(run, &["flag", model[0], model[1], "--threshold", "0.75"]).contains("--force"));
    let deployed = ok_json(run, &["flag", model[0], model[1], "--threshold", "0.75", "--force"]);
    assert_eq!(deployed["flagged"], serde_json::json!(["b2", "p2"]));
}

#[test]
fn missing_inputs_fail_loudly() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path();
    assert!(fails(run, &["split"]).contains("ingest"));
    assert!(fails(run, &["evaluate", "--model", "vgg19-binary"]).contains("train"));
    assert!(fails(run, &["roc", "--model", "vgg19-binary"]).contains("evaluate"));
    assert!(fails(run, &["review", "export"]).contains("flag"));
    let err = fails(run, &["train", "--backbone", "Foo", "--task", "binary"]);
    for name in ["AlexNet", "GoogLeNet", "Vgg19", "Inceptionv3", "ResNet50", "SqueezeNet"] {
        assert!(err.contains(name), "{err}");
    }
    let out = tonguescreen(run, &["--json", "report"]);
    assert!(out.status.success());
}

/// Ten solid-colour fissured tongues and ten striped leukoplakia, each
/// inside a known ROI with a yellow border around it.
fn write_dataset(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let mut csv = String::from("file,class,annotator,roi_x,roi_y,roi_w,roi_h\n");
    for i in 0..20u32 {
        let striped = i % 2 == 1;
        let img = RgbImage::from_fn(150, 140, |x, y| {
            let inside = (10..130).contains(&x) && (10..130).contains(&y);
            if !inside {
                Rgb([255, 255, 0])
            } else if striped && (x / 20) % 2 == 0 {
                Rgb([20, 20, 30])
            } else {
                Rgb([180 + (i * 3) as u8, 90 + (i * 5) as u8, 120])
            }
        });
        let name = format!("case{i:02}.png");
        img.save(dir.join(&name)).unwrap();
        let class = if striped { "LP" } else { "FT" };
        csv.push_str(&format!("{name},{class},dr_a,10,10,120,120\n"));
    }
    fs::write(dir.join("labels.csv"), csv).unwrap();
}

#[test]
fn full_workflow_from_images_to_ensemble() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_dataset(&raw);
    let run = tmp.path().join("run");
    let run = run.as_path();
    let raw_s = raw.to_str().unwrap();
    let labels = raw.join("labels.csv");

    let ingested = ok_json(run, &["ingest", "--images", raw_s, "--labels", labels.to_str().unwrap(), "--task", "binary"]);
    assert_eq!(ingested["records"], 20);
    assert!(fails(run, &["ingest", "--images", raw_s, "--labels", labels.to_str().unwrap(), "--task", "binary"])
        .contains("--force"));

    let split = ok_json(run, &["--seed", "3", "split"]);
    assert_eq!((split["train"].as_u64(), split["validation"].as_u64()), (Some(16), Some(4)));
    assert_eq!(ok_json(run, &["--seed", "3", "split"])["status"], "unchanged");
    assert!(fails(run, &["--seed", "4", "split"]).contains("--force"));

    fs::write(run.join("train.toml"), "epochs = 8\nbatch_size = 4\n").unwrap();
    let train = ["train", "--backbone", "squeezenet", "--task", "binary", "--config", "train.toml", "--runs", "2"];
    let trained = ok_json(run, &train);
    assert_eq!(trained["aggregate"]["runs"], 2);
    assert_eq!(trained["aggregate"]["run_seeds"], serde_json::json!([3, 4]));
    let table = fs::read_to_string(run.join("reports/table-binary.tsv")).unwrap();
    assert!(table.starts_with("Model\tA_CC\tS_ENS\tS_PEC\tT_SEC\nSqueezeNet\t"), "{table}");
    assert!(fails(run, &train).contains("--force"));
    assert!(fails(run, &["train", "--backbone", "squeezenet", "--task", "multiclass"]).contains("binary"));
    // Run 0 trains on the split the user drew.
    assert_eq!(
        fs::read(run.join("split.json")).unwrap(),
        fs::read(run.join("models/squeezenet-binary/run-0/split.json")).unwrap()
    );

    let text = ok(run, &["evaluate", "--model", "squeezenet-binary/run-1"]);
    assert!(text.contains("A_CC"), "{text}");
    let eval = run.join("eval/squeezenet-binary-run-1");
    for f in ["predictions.jsonl", "confusion.txt", "metrics.json"] {
        assert!(eval.join(f).exists(), "{f}");
    }
    let metrics: Value = serde_json::from_slice(&fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    let cells: u64 = metrics["confusion"]["counts"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(cells, 4);
    ok(run, &["roc", "--model", "squeezenet-binary/run-1"]);
    assert!(eval.join("roc.csv").exists() && eval.join("roc.png").exists());

    // Review items point at the ROI crops the service will serve.
    let first: Value = serde_json::from_str(fs::read_to_string(eval.join("predictions.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let image_path = first["image_path"].as_str().unwrap();
    assert!(image_path.ends_with("_roi.png") && run.join(image_path).exists(), "{image_path}");

    // Deployment mode always has something to flag at threshold 1.
    let flagged = ok_json(run, &["flag", "--model", "squeezenet-binary/run-1", "--threshold", "1.0"]);
    let k = flagged["flagged"].as_array().unwrap().len();
    assert_eq!(k, 4);
    ok(run, &["review", "export", "--out", "review/q.jsonl"]);
    let ids = queue_ids(&run.join("review/q.jsonl"));
    assert_eq!(ids.len(), k);

    let corrupt = tmp.path().join("corrupt.png");
    fs::write(&corrupt, b"not an image").unwrap();
    let good0 = raw.join("case00.png");
    let good1 = raw.join("case01.png");
    let out = tonguescreen(
        run,
        &["--json", "predict", "--model", "squeezenet-binary", "--overlay", "--images", good0.to_str().unwrap(), corrupt.to_str().unwrap(), good1.to_str().unwrap()],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt.png"));
    let body: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(body["failed"], 1);
    for r in body["results"].as_array().unwrap() {
        if let Some(scores) = r["scores"].as_array() {
            let sum: f64 = scores.iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(Path::new(r["overlay"].as_str().unwrap()).exists());
        }
    }
    assert_eq!(fs::read_dir(run.join("overlays")).unwrap().count(), 2);

    let ckpt = ok_json(run, &["weights", "export", "--backbone", "SqueezeNet"]);
    assert!(Path::new(ckpt["path"].as_str().unwrap()).exists());
}

#[test]
fn same_seed_same_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_dataset(&raw);
    let labels = raw.join("labels.csv");
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        ok(&run, &["ingest", "--images", raw.to_str().unwrap(), "--labels", labels.to_str().unwrap(), "--task", "binary"]);
        ok(&run, &["--seed", "11", "split"]);
        fs::write(run.join("t.toml"), "epochs = 2\nbatch_size = 4\n").unwrap();
        let mut v = ok_json(&run, &["train", "--backbone", "AlexNet", "--task", "binary", "--config", "t.toml", "--runs", "1"]);
        let mut r = v["runs"][0].take();
        r["train_seconds"] = Value::Null;
        reports.push(r);
    }
    assert_eq!(reports[0], reports[1]);
}
