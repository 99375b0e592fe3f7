//! `amodal`: generate scenes, train, predict, evaluate and run ablations.
//!
//! Every configuration is JSON. On failure the process prints
//! `{"error": <kind>, "message": <text>}` to stderr and exits nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use layered_amodal::cluster::ClusterConfig;
use layered_amodal::eval::{evaluate, EvalConfig, SamplePrediction};
use layered_amodal::harness::{
    detect_predicted, read_predictions, run_experiment, write_outputs, write_predictions,
    ExperimentKind, ExperimentSpec,
};
use layered_amodal::losscore::LossConfig;
use layered_amodal::net::train::write_loss_log;
use layered_amodal::net::{checkpoint, train, ArchConfig, Predictor, TrainConfig, TrainingData};
use layered_amodal::scenegen::{generate_dataset, read_dataset, write_dataset, SceneConfig};
use layered_amodal::{Error, Result};

#[derive(Parser)]
#[command(
    name = "amodal",
    version,
    about = "Layered-embedding amodal instance segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint over a dataset and write `<out>/<idx>.json`.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clustering configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        cluster: Option<PathBuf>,
    },
    /// Evaluate a prediction directory against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluation configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an ablation experiment.
    Ablate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Kind {
    GtLayers,
    SemanticGtSwap,
    ClusteringGtSwap,
    DimSweep,
    TrainEval,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::GtLayers => Self::GtLayers,
            Kind::SemanticGtSwap => Self::SemanticGtSwap,
            Kind::ClusteringGtSwap => Self::ClusteringGtSwap,
            Kind::DimSweep => Self::DimSweep,
            Kind::TrainEval => Self::TrainEval,
        }
    }
}

/// `generate --config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenerateConfig {
    scene: SceneConfig,
    num_samples: usize,
}

/// `train --config` file. Canvas, label size and class count come from
/// the dataset.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    arch: ArchConfig,
    train: TrainConfig,
    loss: LossConfig,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => {
            let cfg: GenerateConfig = read_json(&config)?;
            if cfg.num_samples == 0 {
                return Err(Error::InvalidConfig("num_samples must be positive".into()));
            }
            let samples = generate_dataset(&cfg.scene, cfg.num_samples)?;
            write_dataset(&out, &cfg.scene, &samples)
        }
        Command::Train { data, config, out } => {
            let cfg: TrainFile = read_json(&config)?;
            let dataset = read_dataset(&data)?;
            let arch = ArchConfig {
                canvas_size: dataset.config.canvas_size,
                label_size: dataset.config.label_size,
                num_classes: dataset.config.num_classes(),
                ..cfg.arch
            };
            let mut model = Predictor::<f32>::init(&arch, cfg.train.seed)?;
            let log = train(
                &mut model,
                TrainingData::Fixed(&dataset.samples),
                &cfg.loss,
                &cfg.train,
                |e| eprintln!("epoch {} loss {:.6}", e.epoch, e.total),
            )?;
            checkpoint::save(&out, &model)?;
            write_loss_log(&out.with_extension("loss.csv"), &log)
        }
        Command::Predict {
            ckpt,
            data,
            out,
            cluster,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let cluster: ClusterConfig =
                cluster.map_or_else(|| Ok(ClusterConfig::default()), |p| read_json(&p))?;
            let dataset = read_dataset(&data)?;
            let predictions = dataset
                .samples
                .par_iter()
                .map(|s| {
                    let maps = model.predict(&s.rendered.image)?;
                    Ok(SamplePrediction {
                        sample: s.index,
                        detections: detect_predicted(&maps, &cluster)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_predictions(&out, &predictions)
        }
        Command::Eval {
            pred,
            data,
            report,
            config,
        } => {
            let config: EvalConfig =
                config.map_or_else(|| Ok(EvalConfig::default()), |p| read_json(&p))?;
            let dataset = read_dataset(&data)?;
            let predictions = read_predictions(&pred)?;
            let result = evaluate(&predictions, &dataset.samples, &config)?;
            result.write_json(&report)?;
            result.write_csv(&report.with_extension("csv"))
        }
        Command::Ablate { kind, spec, out } => {
            let mut spec: ExperimentSpec = read_json(&spec)?;
            spec.kind = kind.into();
            let output = run_experiment(&spec)?;
            write_outputs(&out, &spec, &output)
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
