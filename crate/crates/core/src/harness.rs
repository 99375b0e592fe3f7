//! Desk-scale experiment runners behind the `ablate` command.
//!
//! Every runner takes an [`ExperimentSpec`], evaluates its grid cells in
//! parallel (each cell is deterministic on its own), and can write a
//! self-describing output directory: `manifest.json` with the full spec and
//! crate version, a CSV table with one row per cell, the raw reports as
//! JSON, and SVG line plots for the dimension sweep. Re-running a manifest's
//! spec reproduces the table bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    assemble_detections, cluster_embeddings, ClusterConfig, DetectionRecord, InstanceDetection,
};
use crate::eval::{evaluate, EvalConfig, EvalReport, SamplePrediction};
use crate::losscore::LossConfig;
use crate::net::{
    checkpoint, oracle_predict, train, ArchConfig, EpochLog, HeadMaps, OracleConfig, Predictor,
    TargetLayout, TrainConfig, TrainingData,
};
use crate::raster::{LabelMap, Mask};
use crate::rng;
use crate::scenegen::{generate_dataset, layered_gt_masks, Sample, SceneConfig, ShapeKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GtLayers,
    SemanticGtSwap,
    ClusteringGtSwap,
    DimSweep,
    TrainEval,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::GtLayers => "gt_layers",
            Self::SemanticGtSwap => "semantic_gt_swap",
            Self::ClusteringGtSwap => "clustering_gt_swap",
            Self::DimSweep => "dim_sweep",
            Self::TrainEval => "train_eval",
        }
    }
}

/// How ground-truth masks are scored when fed to the evaluator as
/// detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtScoring {
    /// Every detection scores 1; ties are ranked by instance id.
    Unit,
    /// Score is the fraction of the amodal mask the detection covers, so
    /// complete masks outrank truncated ones.
    Completeness,
}

/// Where the embeddings of the dimension sweep come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Oracle embeddings restricted to C dimensions, with noise.
    Fast,
    /// A predictor trained per cell.
    Train,
}

/// Source of head maps for the semantic swap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadSource {
    Oracle,
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Evaluation scenes. `instances_per_class` is overridden by the `instances`
    /// grid where one applies.
    pub scene: SceneConfig,
    /// Evaluation samples per grid cell.
    pub num_samples: usize,
    pub layers: Vec<usize>,
    pub instances: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub gt_scoring: GtScoring,
    pub eval: EvalConfig,
    pub cluster: ClusterConfig,
    pub oracle: OracleConfig,
    pub sweep_mode: SweepMode,
    pub head_source: HeadSource,
    /// Fraction of predicted semantic pixels replaced by a different random
    /// label before clustering.
    pub semantic_flip_rate: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Training scenes for train mode; the evaluation scene seed is kept
    /// separate so held-out samples never overlap.
    pub train_scene: SceneConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::GtLayers,
            scene: SceneConfig::default(),
            num_samples: 200,
            layers: vec![1, 2, 3, 4],
            instances: vec![6, 12],
            embed_dims: (1..=6).collect(),
            gt_scoring: GtScoring::Completeness,
            eval: EvalConfig::default(),
            cluster: ClusterConfig::default(),
            oracle: OracleConfig::default(),
            sweep_mode: SweepMode::Fast,
            head_source: HeadSource::Oracle,
            semantic_flip_rate: 0.0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            train_scene: SceneConfig {
                seed: 1,
                ..SceneConfig::default()
            },
        }
    }
}

impl ExperimentSpec {
    /// Fast-mode dimension sweep at desk scale: rectangles only,
    /// `N in {6, 12, 18, 24, 30}`, `C in 1..=6`, oracle targets packed into
    /// `[-3.5, 3.5]^C` with noise of L1 size independent of C.
    pub fn dim_sweep() -> Self {
        Self {
            kind: ExperimentKind::DimSweep,
            scene: SceneConfig {
                classes: vec![ShapeKind::Rectangle],
                ..SceneConfig::default()
            },
            instances: vec![6, 12, 18, 24, 30],
            embed_dims: (1..=6).collect(),
            oracle: OracleConfig {
                sigma: 1.0,
                normalize_noise: true,
                layout: TargetLayout::Bounded { half_extent: 3.5 },
                ..OracleConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_samples == 0 {
            return bad("num_samples must be positive");
        }
        match self.kind {
            ExperimentKind::GtLayers if self.layers.is_empty() || self.layers.contains(&0) => {
                return bad("layers grid must be nonempty and positive")
            }
            ExperimentKind::DimSweep
                if self.embed_dims.is_empty() || self.embed_dims.contains(&0) =>
            {
                return bad("embed_dims grid must be nonempty and positive")
            }
            ExperimentKind::GtLayers
            | ExperimentKind::ClusteringGtSwap
            | ExperimentKind::DimSweep
                if self.instances.is_empty() || self.instances.contains(&0) =>
            {
                return bad("instances grid must be nonempty and positive")
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.semantic_flip_rate) {
            return bad("semantic_flip_rate must lie in [0, 1]");
        }
        self.scene.validate()?;
        self.eval.validate()?;
        self.cluster.validate()?;
        self.oracle.validate()
    }

    fn scene_with(&self, instances: usize) -> SceneConfig {
        SceneConfig {
            instances_per_class: instances,
            ..self.scene.clone()
        }
    }

    fn eval_set(&self, instances: usize) -> Result<Vec<Sample>> {
        generate_dataset(&self.scene_with(instances), self.num_samples)
    }
}

/// One row of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub instances: Option<usize>,
    pub layers: Option<usize>,
    pub embed_dim: Option<usize>,
    /// Free-form row label, e.g. which semantic gates were used.
    pub variant: Option<String>,
    /// `None` when the cell could not be run (e.g. infeasible lattice).
    pub report: Option<EvalReport>,
    pub note: Option<String>,
}

impl Cell {
    fn new() -> Self {
        Self {
            instances: None,
            layers: None,
            embed_dim: None,
            variant: None,
            report: None,
            note: None,
        }
    }
}

/// Result of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub cells: Vec<Cell>,
    /// Per-epoch training losses, one log per trained model.
    pub training: Vec<Vec<EpochLog>>,
}

impl ExperimentOutput {
    /// The cell with the given grid coordinates.
    pub fn cell(
        &self,
        instances: Option<usize>,
        layers: Option<usize>,
        embed_dim: Option<usize>,
    ) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.instances == instances && c.layers == layers && c.embed_dim == embed_dim)
    }
}

/// Detections built straight from ground-truth masks, one per instance.
pub fn gt_detections(
    sample: &Sample,
    masks: Vec<Mask>,
    scoring: GtScoring,
) -> Vec<InstanceDetection> {
    let r = &sample.rendered;
    masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let score = match scoring {
                GtScoring::Unit => 1.0,
                GtScoring::Completeness => m.count() as f64 / r.amodal_masks[i].count() as f64,
            };
            InstanceDetection {
                instance_id: i,
                class_id: sample.scene.class_of(i),
                occ_mask: Mask::filled(m.width, m.height, false),
                fg_mask: m,
                score,
            }
        })
        .collect()
}

/// Masks recovered from the two-layer instance label maps, as a perfect
/// clustering would produce them.
pub fn label_map_masks(sample: &Sample) -> Vec<Mask> {
    let r = &sample.rendered;
    (0..r.num_instances())
        .map(|i| r.fg_instance.mask_of(i).union(&r.occ_instance.mask_of(i)))
        .collect()
}

fn evaluate_detections(
    samples: &[Sample],
    detections: Vec<Vec<InstanceDetection>>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let preds: Vec<SamplePrediction> = samples
        .iter()
        .zip(detections)
        .map(|(s, detections)| SamplePrediction {
            sample: s.index,
            detections,
        })
        .collect();
    evaluate(&preds, samples, config)
}

/// Clusters head maps under the given semantic gates and assembles detections.
pub fn detect(
    maps: &HeadMaps,
    fg_sem: &LabelMap,
    occ_sem: &LabelMap,
    config: &ClusterConfig,
) -> Result<Vec<InstanceDetection>> {
    let clusters = cluster_embeddings(&maps.fg_embed, &maps.occ_embed, fg_sem, occ_sem, config)?;
    Ok(assemble_detections(
        &clusters,
        &maps.fg_embed,
        &maps.occ_embed,
        fg_sem,
        occ_sem,
        config,
    ))
}

/// Clusters head maps under their own predicted semantic gates.
pub fn detect_predicted(maps: &HeadMaps, config: &ClusterConfig) -> Result<Vec<InstanceDetection>> {
    let (fg, occ) = maps.semantic_labels();
    detect(maps, &fg, &occ, config)
}

/// Replaces a `rate` fraction of pixels with a different label drawn
/// uniformly from `0..=num_classes`.
pub fn corrupt_labels(labels: &LabelMap, num_classes: usize, rate: f64, seed: u64) -> LabelMap {
    let mut out = labels.clone();
    if rate <= 0.0 || num_classes == 0 {
        return out;
    }
    let mut r = rng::stream(seed);
    for v in out.data.iter_mut() {
        if r.random_bool(rate) {
            let shift = r.random_range(1..=num_classes as u16);
            *v = (*v + shift) % (num_classes as u16 + 1);
        }
    }
    out
}

/// Oracle heads for one sample with the spec's oracle settings at
/// dimension `embed_dim`; the noise seed is derived from the sample index.
pub fn sweep_oracle(spec: &ExperimentSpec, sample: &Sample, embed_dim: usize) -> Result<HeadMaps> {
    let config = OracleConfig {
        embed_dim,
        seed: rng::split(spec.oracle.seed, sample.index as u64),
        ..spec.oracle.clone()
    };
    oracle_predict(&sample.scene, &sample.rendered, &config)
}

/// Ground-truth masks from the top `L` layers, scored per
/// [`ExperimentSpec::gt_scoring`], for every `(N, L)` of the grid.
pub fn run_gt_layer_ablation(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &n in &spec.instances {
        let samples = spec.eval_set(n)?;
        let rows = spec
            .layers
            .par_iter()
            .map(|&l| {
                let dets = samples
                    .iter()
                    .map(|s| gt_detections(s, layered_gt_masks(&s.scene, l), spec.gt_scoring))
                    .collect();
                Ok(Cell {
                    instances: Some(n),
                    layers: Some(l),
                    report: Some(evaluate_detections(&samples, dets, &spec.eval)?),
                    ..Cell::new()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        cells.extend(rows);
    }
    Ok(ExperimentOutput {
        kind: ExperimentKind::GtLayers,
        cells,
        training: Vec::new(),
    })
}

/// Replaces clustering by the ground-truth two-layer instance labels. The
/// masks are read from the rendered label maps rather than the cover
/// stacks, so agreement with the `L = 2` ablation is a real cross-check.
pub fn run_clustering_gt_swap(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let cells = spec
        .instances
        .iter()
        .map(|&n| {
            let samples = spec.eval_set(n)?;
            let dets = samples
                .iter()
                .map(|s| gt_detections(s, label_map_masks(s), spec.gt_scoring))
                .collect();
            Ok(Cell {
                instances: Some(n),
                layers: Some(2),
                variant: Some("gt_clustering".into()),
                report: Some(evaluate_detections(&samples, dets, &spec.eval)?),
                ..Cell::new()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutput {
        kind: ExperimentKind::ClusteringGtSwap,
        cells,
        training: Vec::new(),
    })
}

/// Evaluates the same head maps twice, gated by predicted and then by
/// ground-truth semantics. Predicted gates may be corrupted on purpose.
pub fn run_semantic_gt_swap(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let samples = generate_dataset(&spec.scene, spec.num_samples)?;
    let model = match &spec.head_source {
        HeadSource::Oracle => None,
        HeadSource::Checkpoint { path } => Some(checkpoint::load(path)?),
    };
    let k = spec.scene.num_classes();
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let maps = match &model {
                Some(m) => m.predict(&s.rendered.image)?,
                None => sweep_oracle(spec, s, spec.oracle.embed_dim)?,
            };
            let (fg, occ) = maps.semantic_labels();
            let seed = rng::split(spec.oracle.seed ^ 0x5e3a_171c, s.index as u64);
            let fg = corrupt_labels(&fg, k, spec.semantic_flip_rate, rng::split(seed, 0));
            let occ = corrupt_labels(&occ, k, spec.semantic_flip_rate, rng::split(seed, 1));
            let predicted = detect(&maps, &fg, &occ, &spec.cluster)?;
            let r = &s.rendered;
            let truth = detect(&maps, &r.fg_class, &r.occ_class, &spec.cluster)?;
            Ok((predicted, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    let (predicted, truth): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let mut cells = Vec::new();
    for (variant, dets) in [("predicted", predicted), ("ground_truth", truth)] {
        cells.push(Cell {
            instances: Some(spec.scene.instances_per_class),
            variant: Some(variant.into()),
            report: Some(evaluate_detections(&samples, dets, &spec.eval)?),
            ..Cell::new()
        });
    }
    Ok(ExperimentOutput {
        kind: ExperimentKind::SemanticGtSwap,
        cells,
        training: Vec::new(),
    })
}

/// Single-class dataset for the dimension sweep.
fn sweep_scene(spec: &ExperimentSpec, instances: usize) -> SceneConfig {
    SceneConfig {
        classes: vec![ShapeKind::Rectangle],
        ..spec.scene_with(instances)
    }
}

/// AP/AR over the `(N, C)` grid on single-class rectangle scenes. Fast mode
/// uses oracle embeddings; cells whose lattice cannot hold N instances are
/// kept with an `infeasible` note.
pub fn run_dim_sweep(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut training = Vec::new();
    for &n in &spec.instances {
        let scene = sweep_scene(spec, n);
        let samples = generate_dataset(&scene, spec.num_samples)?;
        let rows = spec
            .embed_dims
            .par_iter()
            .map(|&c| {
                let cell = Cell {
                    instances: Some(n),
                    embed_dim: Some(c),
                    ..Cell::new()
                };
                match spec.sweep_mode {
                    SweepMode::Fast => {
                        let dets = samples
                            .iter()
                            .map(|s| detect_predicted(&sweep_oracle(spec, s, c)?, &spec.cluster))
                            .collect::<Result<Vec<_>>>();
                        match dets {
                            Ok(dets) => Ok((
                                Cell {
                                    report: Some(evaluate_detections(&samples, dets, &spec.eval)?),
                                    ..cell
                                },
                                None,
                            )),
                            Err(e @ Error::LatticeInfeasible { .. }) => Ok((
                                Cell {
                                    note: Some(format!("infeasible: {e}")),
                                    ..cell
                                },
                                None,
                            )),
                            Err(e) => Err(e),
                        }
                    }
                    SweepMode::Train => {
                        let arch = ArchConfig {
                            num_classes: 1,
                            embed_dim: c,
                            canvas_size: scene.canvas_size,
                            label_size: scene.label_size,
                            ..spec.arch.clone()
                        };
                        let train_scene = SceneConfig {
                            classes: vec![ShapeKind::Rectangle],
                            instances_per_class: n,
                            ..spec.train_scene.clone()
                        };
                        let (model, log) = train_model(&arch, &train_scene, spec)?;
                        let report = evaluate_model(&model, &samples, spec)?;
                        Ok((
                            Cell {
                                report: Some(report),
                                ..cell
                            },
                            Some(log),
                        ))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for (cell, log) in rows {
            cells.push(cell);
            training.extend(log);
        }
    }
    Ok(ExperimentOutput {
        kind: ExperimentKind::DimSweep,
        cells,
        training,
    })
}

fn train_model(
    arch: &ArchConfig,
    scene: &SceneConfig,
    spec: &ExperimentSpec,
) -> Result<(Predictor<f32>, Vec<EpochLog>)> {
    let mut model = Predictor::<f32>::init(arch, spec.train.seed)?;
    let log = train(
        &mut model,
        TrainingData::Streaming(scene),
        &spec.loss,
        &spec.train,
        |_| {},
    )?;
    Ok((model, log))
}

/// Runs a trained predictor over samples and evaluates its detections.
pub fn evaluate_model(
    model: &Predictor<f32>,
    samples: &[Sample],
    spec: &ExperimentSpec,
) -> Result<EvalReport> {
    let dets = samples
        .par_iter()
        .map(|s| detect_predicted(&model.predict(&s.rendered.image)?, &spec.cluster))
        .collect::<Result<Vec<_>>>()?;
    evaluate_detections(samples, dets, &spec.eval)
}

/// Trains a predictor on streaming `train_scene` samples and evaluates it on
/// `num_samples` held-out `scene` samples.
pub fn run_train_eval(spec: &ExperimentSpec) -> Result<(Predictor<f32>, ExperimentOutput)> {
    spec.validate()?;
    if spec.train_scene.seed == spec.scene.seed {
        return Err(Error::InvalidConfig(
            "train_scene and scene must use different seeds".into(),
        ));
    }
    let arch = ArchConfig {
        num_classes: spec.train_scene.num_classes(),
        canvas_size: spec.train_scene.canvas_size,
        label_size: spec.train_scene.label_size,
        ..spec.arch.clone()
    };
    let (model, log) = train_model(&arch, &spec.train_scene, spec)?;
    let samples = generate_dataset(&spec.scene, spec.num_samples)?;
    let report = evaluate_model(&model, &samples, spec)?;
    let output = ExperimentOutput {
        kind: ExperimentKind::TrainEval,
        cells: vec![Cell {
            instances: Some(spec.scene.instances_per_class),
            embed_dim: Some(arch.embed_dim),
            report: Some(report),
            ..Cell::new()
        }],
        training: vec![log],
    };
    Ok((model, output))
}

/// Dispatches on `spec.kind`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    match spec.kind {
        ExperimentKind::GtLayers => run_gt_layer_ablation(spec),
        ExperimentKind::SemanticGtSwap => run_semantic_gt_swap(spec),
        ExperimentKind::ClusteringGtSwap => run_clustering_gt_swap(spec),
        ExperimentKind::DimSweep => run_dim_sweep(spec),
        ExperimentKind::TrainEval => run_train_eval(spec).map(|(_, out)| out),
    }
}

/// On-disk detections of one sample: `<dir>/<index>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub sample: usize,
    pub detections: Vec<DetectionRecord>,
}

pub fn write_predictions(dir: &Path, predictions: &[SamplePrediction]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in predictions {
        let file = PredictionFile {
            sample: p.sample,
            detections: p.detections.iter().map(DetectionRecord::from).collect(),
        };
        write_text(&dir.join(format!("{}.json", p.sample)), &to_json(&file))?;
    }
    Ok(())
}

/// Reads every `*.json` file of a prediction directory. The result is
/// sorted by sample index, so directory listing order never matters.
pub fn read_predictions(dir: &Path) -> Result<Vec<SamplePrediction>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: PredictionFile =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let detections = file
            .detections
            .iter()
            .map(DetectionRecord::to_detection)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Sample {
                sample: file.sample,
                message: e.to_string(),
            })?;
        out.push(SamplePrediction {
            sample: file.sample,
            detections,
        });
    }
    out.sort_by_key(|p| p.sample);
    if let Some(w) = out.windows(2).find(|w| w[0].sample == w[1].sample) {
        return Err(Error::Sample {
            sample: w[0].sample,
            message: "more than one prediction file".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub spec: ExperimentSpec,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("experiment outputs serialise")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// CSV with one row per cell; metric columns are empty for skipped cells.
pub fn table_csv(output: &ExperimentOutput) -> String {
    let mut s = String::from("instances,layers,embed_dim,variant,status,ap,ap50,ap75,ar100,ar_none,ar_partial,ar_heavy\n");
    for c in &output.cells {
        let status = if c.report.is_some() {
            "ok"
        } else {
            "infeasible"
        };
        let _ = write!(
            s,
            "{},{},{},{},{}",
            fmt_opt(c.instances),
            fmt_opt(c.layers),
            fmt_opt(c.embed_dim),
            c.variant.as_deref().unwrap_or(""),
            status
        );
        for i in 0..7 {
            let v = c.report.as_ref().and_then(|r| r.metrics()[i].1);
            let _ = write!(s, ",{}", v.map_or_else(String::new, |x| format!("{x:.6}")));
        }
        s.push('\n');
    }
    s
}

/// Line plot of one metric against N, one series per embedding dimension.
pub fn sweep_svg(output: &ExperimentOutput, metric: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let index = [
        "ap",
        "ap50",
        "ap75",
        "ar100",
        "ar_none",
        "ar_partial",
        "ar_heavy",
    ]
    .iter()
    .position(|&m| m == metric)
    .unwrap_or(0);
    let mut ns: Vec<usize> = output.cells.iter().filter_map(|c| c.instances).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut dims: Vec<usize> = output.cells.iter().filter_map(|c| c.embed_dim).collect();
    dims.sort_unstable();
    dims.dedup();
    let (lo, hi) = (
        *ns.first().unwrap_or(&0) as f64,
        *ns.last().unwrap_or(&1) as f64,
    );
    let x = |n: usize| M + (n as f64 - lo) / (hi - lo).max(1.0) * (W - 2.0 * M);
    let y = |v: f64| H - M - v.clamp(0.0, 1.0) * (H - 2.0 * M);
    let palette = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{metric} vs instances per class</text>",
        W / 2.0
    );
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"black\" points=\"{M},{M} {M},{b} {r},{b}\"/>",
        b = H - M,
        r = W - M
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            M - 4.0,
            y(v) + 4.0
        );
    }
    for &n in &ns {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{n}</text>",
            x(n),
            H - M + 16.0
        );
    }
    for (i, &c) in dims.iter().enumerate() {
        let colour = palette[i % palette.len()];
        let points: Vec<String> = ns
            .iter()
            .filter_map(|&n| {
                let v = output
                    .cell(Some(n), None, Some(c))?
                    .report
                    .as_ref()?
                    .metrics()[index]
                    .1?;
                Some(format!("{:.1},{:.1}", x(n), y(v)))
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">C={c}</text>",
            W - M + 6.0,
            M + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the manifest, table, reports, training logs and plots.
pub fn write_outputs(dir: &Path, spec: &ExperimentSpec, output: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        software: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        spec: spec.clone(),
    };
    write_text(&dir.join("manifest.json"), &to_json(&manifest))?;
    write_text(
        &dir.join(format!("{}.csv", spec.kind.name())),
        &table_csv(output),
    )?;
    write_text(&dir.join("reports.json"), &to_json(output))?;
    if spec.kind == ExperimentKind::DimSweep {
        for metric in ["ap", "ar_heavy"] {
            write_text(
                &dir.join(format!("dim_sweep_{metric}.svg")),
                &sweep_svg(output, metric),
            )?;
        }
    }
    Ok(())
}
