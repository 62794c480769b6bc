//! `tonguescreen`: ingest, split, train, evaluate, flag, review and report
//! inside one run directory.

mod layout;
mod pipeline;
mod review;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use tonguescreen_core::{Exec, TaskKind};

use crate::layout::{ModelRef, RunDir};

#[derive(Debug, Parser)]
#[command(name = "tonguescreen", version, about = "Tongue-lesion screening with transfer learning and physician triage")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run directory holding every input and output of the pipeline.
    #[arg(long, global = true, default_value = ".")]
    pub run_dir: PathBuf,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for every random choice (splits, head initialization, shuffling,
    /// augmentation). `train` defaults to the split's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run the data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

impl Global {
    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn run(&self) -> RunDir {
        RunDir::new(&self.run_dir)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Copy an annotated image folder into the run as canonical PNGs plus a manifest.
    Ingest {
        /// Folder holding the source photographs.
        #[arg(long)]
        images: PathBuf,
        /// CSV with columns file,class[,annotator][,roi_x,roi_y,roi_w,roi_h].
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Lesion class codes to leave out (e.g. OT,PFP).
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        /// Replace an existing manifest.
        #[arg(long)]
        force: bool,
    },
    /// Draw the balanced train/validation split.
    Split {
        #[arg(long, default_value_t = tonguescreen_core::dataset::DEFAULT_TRAIN_FRACTION)]
        train_fraction: f64,
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune a backbone over several independent runs.
    Train {
        #[arg(long)]
        backbone: String,
        #[arg(long)]
        task: TaskKind,
        /// TOML training configuration; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `num_runs` from the configuration.
        #[arg(long)]
        runs: Option<usize>,
        /// Replace previously trained runs of this backbone and task.
        #[arg(long)]
        force: bool,
    },
    /// Score a trained model on its validation images.
    Evaluate {
        #[arg(long)]
        model: ModelRef,
    },
    /// ROC curve and AUC from the evaluation's predictions.
    Roc {
        #[arg(long)]
        model: ModelRef,
    },
    /// Queue doubtful cases for physician review.
    Flag {
        #[arg(long)]
        model: ModelRef,
        /// Flag by confidence instead of by known misclassification.
        #[arg(long)]
        deployment: bool,
        /// Confidence threshold; implies --deployment.
        #[arg(long)]
        threshold: Option<f64>,
        /// Discard the current queue even if it holds physician labels.
        #[arg(long)]
        force: bool,
    },
    /// Physician review queue.
    Review {
        #[command(subcommand)]
        action: ReviewAction,
    },
    /// Base vs ensemble accuracy for the loaded review.
    Report,
    /// Classify arbitrary images.
    Predict {
        #[arg(long)]
        model: ModelRef,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        /// Write labelled copies to <run>/overlays.
        #[arg(long)]
        overlay: bool,
    },
    /// Pretrained checkpoints.
    Weights {
        #[command(subcommand)]
        action: WeightsAction,
    },
}

#[derive(Debug, Subcommand)]
enum ReviewAction {
    /// Write the pending queue for offline labeling.
    Export {
        #[arg(long, default_value = "review/queue.jsonl")]
        out: PathBuf,
        /// Include model scores and predictions (unblinded review).
        #[arg(long)]
        reveal: bool,
    },
    /// Apply a JSONL file of {item_id, label, reviewer, revision} lines.
    Import {
        #[arg(long)]
        labels: PathBuf,
        /// The labels were given with model output visible.
        #[arg(long)]
        revealed: bool,
    },
    /// Serve the review API (and optionally the UI bundle).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Require `Authorization: Bearer <token>`.
        #[arg(long)]
        token: Option<String>,
        /// Static UI bundle to serve at /.
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long)]
        reveal: bool,
    },
}

#[derive(Debug, Subcommand)]
enum WeightsAction {
    /// Write the built-in reference checkpoint to <run>/weights.
    Export {
        #[arg(long)]
        backbone: String,
        #[arg(long)]
        force: bool,
    },
}

/// What a command reports back: text for people, JSON for scripts.
pub struct Outcome {
    pub text: String,
    pub json: Value,
    /// Nonzero when the command finished but some inputs failed.
    pub failures: usize,
}

impl Outcome {
    pub fn new(text: impl Into<String>, json: Value) -> Self {
        Self { text: text.into(), json, failures: 0 }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { images, labels, task, exclude, force } => {
            pipeline::ingest(g, &images, &labels, task, &exclude, force)
        }
        Command::Split { train_fraction, force } => pipeline::split(g, train_fraction, force),
        Command::Train { backbone, task, config, runs, force } => {
            pipeline::train(g, &backbone, task, config.as_deref(), runs, force)
        }
        Command::Evaluate { model } => pipeline::evaluate(g, &model),
        Command::Roc { model } => pipeline::roc(g, &model),
        Command::Predict { model, images, overlay } => pipeline::predict(g, &model, &images, overlay),
        Command::Weights { action: WeightsAction::Export { backbone, force } } => {
            pipeline::export_weights(g, &backbone, force)
        }
        Command::Flag { model, deployment, threshold, force } => review::flag(g, &model, deployment, threshold, force),
        Command::Review { action } => match action {
            ReviewAction::Export { out, reveal } => review::export(g, &out, !reveal),
            ReviewAction::Import { labels, revealed } => review::import(g, &labels, !revealed),
            ReviewAction::Serve { bind, token, ui, reveal } => review::serve(g, bind, token, ui, !reveal),
        },
        Command::Report => review::report(g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let json = cli.global.json;
    match dispatch(cli) {
        Ok(out) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("JSON output"));
            } else if !out.text.is_empty() {
                println!("{}", out.text.trim_end());
            }
            if out.failures > 0 {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            if json {
                let body = serde_json::json!({ "error": format!("{e:#}") });
                println!("{}", serde_json::to_string_pretty(&body).expect("JSON output"));
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
