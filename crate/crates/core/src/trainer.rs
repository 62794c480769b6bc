//! Transfer learning: build a model from a pretrained checkpoint with a
//! fresh N-way head, fine-tune it with minibatch SGD + momentum, predict,
//! and repeat the whole procedure over several seeded runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{DynamicImage, RgbImage};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{is_augmentable, AugmentPolicy, Flips};
use crate::backbone::BackboneSpec;
use crate::dataset::{balanced_split, crop_roi, epoch_order, resize_for, DatasetManifest, SplitSpec};
use crate::metrics::{predicted_index, MetricsReport};
use crate::nn::{cross_entropy, softmax, Architecture, Gradients, Network, Param, ParamGroup, Tensor3};
use crate::optim::SgdMomentum;
use crate::provider::PretrainedProvider;
use crate::taxonomy::{TaskClass, TaskSpec};
use crate::{rng, Error, Exec, Result};

/// Standard deviation of the freshly initialized head weights.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub global_lr: f64,
    /// Learning-rate multiplier for the new head's weights and biases.
    pub head_lr_factor: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment_policy: AugmentPolicy,
    pub num_runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            global_lr: 1e-4,
            head_lr_factor: 20.0,
            momentum: 0.9,
            epochs: 15,
            batch_size: 10,
            seed: 0,
            augment_policy: AugmentPolicy::default(),
            num_runs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return fail(format!("global_lr must be > 0 (got {})", self.global_lr));
        }
        if self.head_lr_factor.is_nan() || self.head_lr_factor < 1.0 {
            return fail(format!("head_lr_factor must be >= 1 (got {})", self.head_lr_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1) (got {})", self.momentum));
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        self.augment_policy.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Minibatches per epoch for `n_train` images; the partial last batch counts.
    pub fn iterations_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// A freshly built network ready for fine-tuning.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub backbone: BackboneSpec,
    pub task: TaskSpec,
    pub network: Network,
    pub init_seed: u64,
    pub provider: String,
    pub provider_deterministic: bool,
}

/// Loads the pretrained body for `backbone` and attaches a randomly
/// initialized head with one output per task class.
pub fn build_model(
    provider: &dyn PretrainedProvider,
    backbone: &BackboneSpec,
    task: TaskSpec,
    seed: u64,
) -> Result<ModelHandle> {
    let network = build_network(provider, backbone, task.n(), seed)?;
    Ok(ModelHandle {
        backbone: backbone.clone(),
        task,
        network,
        init_seed: seed,
        provider: provider.name().to_string(),
        provider_deterministic: provider.deterministic(),
    })
}

/// Same as [`build_model`] for an arbitrary class count.
pub fn build_network(
    provider: &dyn PretrainedProvider,
    backbone: &BackboneSpec,
    classes: usize,
    seed: u64,
) -> Result<Network> {
    if classes < 2 {
        return Err(Error::Config(format!("a classifier needs at least 2 classes (got {classes})")));
    }
    let ckpt = provider.load(backbone)?;
    if ckpt.arch.input != backbone.input {
        return Err(Error::Checkpoint(format!(
            "checkpoint '{}' expects {} input, backbone declares {}",
            ckpt.provider_key, ckpt.arch.input, backbone.input
        )));
    }
    let arch = ckpt.arch;
    let mut r = rng::seeded(rng::combine(seed, 0x4ead));
    let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
    let head_w = (0..classes * arch.hidden).map(|_| normal.sample(&mut r) as f32).collect();
    let mut params = ckpt.body;
    params.push(Param::new("head.weight", vec![classes, arch.hidden], head_w, ParamGroup::Head));
    params.push(Param::new("head.bias", vec![classes], vec![0.0; classes], ParamGroup::Head));
    Ok(Network::new(arch, classes, params))
}

/// Images prepared for one backbone (ROI-cropped and resized), with their
/// task class indices.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub task: TaskSpec,
    items: BTreeMap<String, (RgbImage, usize)>,
}

impl LabeledImages {
    pub fn new(task: TaskSpec) -> Self {
        Self { task, items: BTreeMap::new() }
    }

    /// Adds an image that already has the backbone's input size.
    pub fn insert(&mut self, id: impl Into<String>, image: RgbImage, class: TaskClass) -> Result<()> {
        let idx = self.task.index_of(class).ok_or_else(|| Error::ClassNotInTask {
            class: class.to_string(),
            task: self.task.kind.to_string(),
        })?;
        self.items.insert(id.into(), (image, idx));
        Ok(())
    }

    pub fn from_manifest(manifest: &DatasetManifest, base_dir: &Path, backbone: &BackboneSpec, exec: Exec) -> Result<Self> {
        let prepared = exec.try_map(&manifest.records, |r| {
            let cropped = crop_roi(r, base_dir)?;
            let sized = resize_for(backbone, &DynamicImage::ImageRgb8(cropped.image))?;
            Ok::<_, Error>((r.id.clone(), sized, manifest.label_of(r)))
        })?;
        let mut out = LabeledImages::new(manifest.task);
        for (id, img, class) in prepared {
            out.insert(id, img, class)?;
        }
        Ok(out)
    }

    pub fn get(&self, id: &str) -> Result<(&RgbImage, usize)> {
        self.items
            .get(id)
            .map(|(img, c)| (img, *c))
            .ok_or_else(|| Error::Training(format!("no prepared image for id '{id}'")))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationPoint {
    pub iteration: usize,
    pub epoch: usize,
    pub minibatch_accuracy: f64,
    pub minibatch_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub epoch: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub iterations: Vec<IterationPoint>,
    pub validation: Vec<ValidationPoint>,
}

impl TrainingCurve {
    /// Mean minibatch loss of every epoch.
    pub fn epoch_mean_loss(&self) -> Vec<f64> {
        let mut by_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for p in &self.iterations {
            let e = by_epoch.entry(p.epoch).or_default();
            e.0 += p.minibatch_loss;
            e.1 += 1;
        }
        by_epoch.values().map(|(s, n)| s / *n as f64).collect()
    }

    pub fn final_validation_accuracy(&self) -> Option<f64> {
        self.validation.last().map(|v| v.accuracy)
    }

    /// `kind,iteration,epoch,accuracy,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,iteration,epoch,accuracy,loss\n");
        for p in &self.iterations {
            let _ = writeln!(s, "minibatch,{},{},{},{}", p.iteration, p.epoch, p.minibatch_accuracy, p.minibatch_loss);
        }
        for p in &self.validation {
            let _ = writeln!(s, "validation,{},{},{},{}", p.iteration, p.epoch, p.accuracy, p.loss);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut curve = TrainingCurve::default();
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for row in reader.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Training(format!("bad curve row {row:?}")))
            };
            let (iteration, epoch, acc, loss) = (num(1)? as usize, num(2)? as usize, num(3)?, num(4)?);
            match row.get(0) {
                Some("minibatch") => curve.iterations.push(IterationPoint {
                    iteration,
                    epoch,
                    minibatch_accuracy: acc,
                    minibatch_loss: loss,
                }),
                Some("validation") => curve.validation.push(ValidationPoint { iteration, epoch, accuracy: acc, loss }),
                other => return Err(Error::Training(format!("unknown curve row kind {other:?}"))),
            }
        }
        Ok(curve)
    }
}

/// Counters recorded while training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    /// Training presentations per id.
    pub train_presentations: BTreeMap<String, u64>,
    pub augmented_presentations: u64,
    pub validation_presentations: u64,
    /// Validation presentations that were flipped. Always zero.
    pub validation_augmented: u64,
    /// Samples that contributed a gradient, per id.
    pub gradient_samples: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub backbone: BackboneSpec,
    pub task: TaskSpec,
    pub network: Network,
    pub curve: TrainingCurve,
    pub train_seconds: f64,
    pub split_seed: u64,
    pub config: TrainConfig,
    pub provider: String,
    pub provider_deterministic: bool,
    pub weights_ref: Option<PathBuf>,
    pub instrumentation: Instrumentation,
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Gradients,
}

/// Fine-tunes `model` on the training ids of `split`.
pub fn train(
    model: ModelHandle,
    images: &LabeledImages,
    split: &SplitSpec,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainedModel> {
    config.validate()?;
    if split.train_ids.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if model.task != images.task {
        return Err(Error::Training(format!("model task {} but images for {}", model.task, images.task)));
    }
    let ModelHandle { backbone, task, mut network, provider, provider_deterministic, .. } = model;
    let norm = backbone.normalization;
    let mut opt = SgdMomentum::new(
        &network,
        config.global_lr as f32,
        config.momentum as f32,
        config.head_lr_factor as f32,
    );
    let mut curve = TrainingCurve::default();
    let mut instr = Instrumentation::default();
    let start = Instant::now();
    let mut iteration = 0;

    for epoch in 0..config.epochs {
        let order = epoch_order(split, epoch, config.seed);
        for batch in order.chunks(config.batch_size) {
            iteration += 1;
            let mut flips_used = Vec::with_capacity(batch.len());
            for id in batch {
                let flips = if is_augmentable(id, split)? {
                    config.augment_policy.draw(&mut rng::presentation_rng(config.seed, epoch, id))
                } else {
                    Flips::NONE
                };
                flips_used.push(flips);
            }
            let net = &network;
            let items: Vec<(&String, Flips)> = batch.iter().zip(flips_used.iter().copied()).collect();
            let results = exec.try_map(&items, |(id, flips)| -> Result<SampleResult> {
                let (img, target) = images.get(id)?;
                let x = Tensor3::from_rgb(&flips.apply(img), &norm);
                let (logits, cache) = net.forward(&x);
                let (loss, dlogits) = cross_entropy(&logits, target);
                let mut grads = net.zero_grads();
                net.backward(&cache, &dlogits, &mut grads);
                let correct = predicted_index(task, &softmax(&logits)) == target;
                Ok(SampleResult { loss, correct, grads })
            })?;

            // Ordered reduction keeps the sum independent of scheduling.
            let mut grads = network.zero_grads();
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for r in &results {
                loss_sum += r.loss;
                correct += r.correct as usize;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let n = results.len() as f32;
            let loss = loss_sum / results.len() as f64;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { iteration, epoch, loss });
            }
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            opt.step(&mut network, &grads);

            for ((id, flips), _) in items.iter().zip(&results) {
                *instr.train_presentations.entry((*id).clone()).or_default() += 1;
                *instr.gradient_samples.entry((*id).clone()).or_default() += 1;
                instr.augmented_presentations += flips.any() as u64;
            }
            curve.iterations.push(IterationPoint {
                iteration,
                epoch,
                minibatch_accuracy: correct as f64 / results.len() as f64,
                minibatch_loss: loss,
            });
        }

        if !split.validation_ids.is_empty() {
            let (accuracy, loss) = validation_pass(&network, task, &backbone, images, split, &mut instr, exec)?;
            curve.validation.push(ValidationPoint { iteration, epoch, accuracy, loss });
        }
    }

    Ok(TrainedModel {
        backbone,
        task,
        network,
        curve,
        train_seconds: start.elapsed().as_secs_f64(),
        split_seed: split.seed,
        config: config.clone(),
        provider,
        provider_deterministic,
        weights_ref: None,
        instrumentation: instr,
    })
}

fn validation_pass(
    network: &Network,
    task: TaskSpec,
    backbone: &BackboneSpec,
    images: &LabeledImages,
    split: &SplitSpec,
    instr: &mut Instrumentation,
    exec: Exec,
) -> Result<(f64, f64)> {
    let results = exec.try_map(&split.validation_ids, |id| -> Result<(f64, bool, bool)> {
        if is_augmentable(id, split)? {
            return Err(Error::Training(format!("id '{id}' is not a validation id")));
        }
        let (img, target) = images.get(id)?;
        let flips = Flips::NONE;
        let x = Tensor3::from_rgb(&flips.apply(img), &backbone.normalization);
        let logits = network.logits(&x);
        let (loss, _) = cross_entropy(&logits, target);
        Ok((loss, predicted_index(task, &softmax(&logits)) == target, flips.any()))
    })?;
    let n = results.len() as f64;
    instr.validation_presentations += results.len() as u64;
    instr.validation_augmented += results.iter().filter(|r| r.2).count() as u64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    Ok((acc, loss))
}

/// Class probabilities for an image already at the backbone's input size.
pub fn predict_prepared(model: &TrainedModel, image: &RgbImage) -> Vec<f64> {
    softmax(&model.network.logits(&Tensor3::from_rgb(image, &model.backbone.normalization)))
}

/// Class probabilities (softmax of the head outputs) for any decodable image.
pub fn predict(model: &TrainedModel, image: &DynamicImage) -> Result<Vec<f64>> {
    let sized = resize_for(&model.backbone, image)?;
    Ok(predict_prepared(model, &sized))
}

/// Scores and targets of `ids`.
pub fn score_ids(
    model: &TrainedModel,
    images: &LabeledImages,
    ids: &[String],
    exec: Exec,
) -> Result<(Vec<Vec<f64>>, Vec<TaskClass>)> {
    let classes = model.task.classes();
    let out = exec.try_map(ids, |id| -> Result<(Vec<f64>, TaskClass)> {
        let (img, target) = images.get(id)?;
        Ok((predict_prepared(model, img), classes[target]))
    })?;
    Ok(out.into_iter().unzip())
}

pub fn evaluate_validation(model: &TrainedModel, images: &LabeledImages, split: &SplitSpec, exec: Exec) -> Result<MetricsReport> {
    let (scores, targets) = score_ids(model, images, &split.validation_ids, exec)?;
    MetricsReport::evaluate(
        model.backbone.name.as_str(),
        model.task,
        model.split_seed,
        model.train_seconds,
        &scores,
        &targets,
    )
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: TrainedModel,
    pub split: SplitSpec,
    pub report: MetricsReport,
}

/// Trains `config.num_runs` independent models. Run `k` uses seed
/// `split_seed_base + k` for its split, head initialization and training
/// stream.
#[allow(clippy::too_many_arguments)]
pub fn repeat_runs(
    provider: &dyn PretrainedProvider,
    manifest: &DatasetManifest,
    images: &LabeledImages,
    split_seed_base: u64,
    backbone: &BackboneSpec,
    task: TaskSpec,
    config: &TrainConfig,
    exec: Exec,
) -> Result<Vec<RunOutcome>> {
    if config.num_runs < 1 {
        return Err(Error::Config("num_runs must be >= 1".into()));
    }
    (0..config.num_runs as u64)
        .map(|k| {
            let seed = split_seed_base + k;
            let split = balanced_split(manifest, seed)?;
            let handle = build_model(provider, backbone, task, seed)?;
            let run_config = TrainConfig { seed, ..config.clone() };
            let model = train(handle, images, &split, &run_config, exec)?;
            let report = evaluate_validation(&model, images, &split, exec)?;
            Ok(RunOutcome { model, split, report })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    backbone: BackboneSpec,
    task: TaskSpec,
    provider: String,
    provider_deterministic: bool,
    split_seed: u64,
    train_seed: u64,
    config: TrainConfig,
    config_hash: String,
    train_seconds: f64,
    weights: String,
    curve: String,
    architecture: Architecture,
    instrumentation: Instrumentation,
}

impl TrainedModel {
    pub const WEIGHTS_FILE: &'static str = "weights.bin";
    pub const SIDECAR_FILE: &'static str = "model.json";
    pub const CURVE_FILE: &'static str = "curve.csv";

    /// Writes `weights.bin`, `model.json` and `curve.csv` into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let weights = dir.join(Self::WEIGHTS_FILE);
        fs::write(&weights, self.network.to_bytes())?;
        fs::write(dir.join(Self::CURVE_FILE), self.curve.to_csv())?;
        let sidecar = Sidecar {
            backbone: self.backbone.clone(),
            task: self.task,
            provider: self.provider.clone(),
            provider_deterministic: self.provider_deterministic,
            split_seed: self.split_seed,
            train_seed: self.config.seed,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            train_seconds: self.train_seconds,
            weights: Self::WEIGHTS_FILE.into(),
            curve: Self::CURVE_FILE.into(),
            architecture: self.network.arch,
            instrumentation: self.instrumentation.clone(),
        };
        fs::write(dir.join(Self::SIDECAR_FILE), serde_json::to_vec_pretty(&sidecar)?)?;
        self.weights_ref = Some(weights);
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar_path = dir.join(Self::SIDECAR_FILE);
        if !sidecar_path.exists() {
            return Err(Error::Training(format!("no trained model at {}", dir.display())));
        }
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(&sidecar_path)?)?;
        let weights = dir.join(&sidecar.weights);
        let network = Network::from_bytes(&fs::read(&weights)?)?;
        let curve = TrainingCurve::from_csv(&fs::read_to_string(dir.join(&sidecar.curve))?)?;
        Ok(Self {
            backbone: sidecar.backbone,
            task: sidecar.task,
            network,
            curve,
            train_seconds: sidecar.train_seconds,
            split_seed: sidecar.split_seed,
            config: sidecar.config,
            provider: sidecar.provider,
            provider_deterministic: sidecar.provider_deterministic,
            weights_ref: Some(weights),
            instrumentation: sidecar.instrumentation,
        })
    }
}
