//! COCO-style evaluation of amodal instance detections.
//!
//! Detections are matched greedily, class-aware, against ground-truth
//! instances at a ladder of IoU thresholds. Precision is interpolated on a
//! fixed recall grid per class and threshold, then averaged. Recall can be
//! stratified by how heavily each ground-truth instance is occluded.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::InstanceDetection;
use crate::raster::Mask;
use crate::scenegen::{OcclusionCategory, OcclusionThresholds, Sample};
use crate::{Error, Result};

/// Which masks IoU is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Union of both layers against the full instance extent.
    Amodal,
    /// Foreground layer against the visible part only.
    Visible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: usize,
    pub recall_points: usize,
    pub occlusion: OcclusionThresholds,
    pub iou_mode: IouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_detections: 100,
            recall_points: 101,
            occlusion: OcclusionThresholds::default(),
            iou_mode: IouMode::Amodal,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() {
            return Err(Error::InvalidConfig("iou_thresholds is empty".into()));
        }
        if t.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::InvalidConfig(
                "iou thresholds must lie in (0, 1]".into(),
            ));
        }
        if t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "iou thresholds must be strictly increasing".into(),
            ));
        }
        if self.recall_points < 2 {
            return Err(Error::InvalidConfig(
                "recall_points must be at least 2".into(),
            ));
        }
        if self.max_detections == 0 {
            return Err(Error::InvalidConfig(
                "max_detections must be positive".into(),
            ));
        }
        Ok(())
    }

    fn threshold_index(&self, value: f64) -> Option<usize> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - value).abs() < 1e-9)
    }
}

/// A ground-truth instance as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub instance_id: usize,
    pub class_id: usize,
    pub amodal_mask: Mask,
    pub visible_mask: Mask,
    pub category: OcclusionCategory,
}

/// Ground-truth instances of one generated sample.
pub fn ground_truth(sample: &Sample, thresholds: &OcclusionThresholds) -> Vec<GtInstance> {
    let r = &sample.rendered;
    (0..r.num_instances())
        .map(|n| GtInstance {
            instance_id: n,
            class_id: sample.scene.class_of(n),
            amodal_mask: r.amodal_masks[n].clone(),
            visible_mask: r.visible_mask(n),
            category: thresholds.categorize(r.occlusion_fraction[n]),
        })
        .collect()
}

/// Intersection over union; 0 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Outcome of matching one sample's detections at one threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// For each detection (input order), the matched GT index.
    pub detection_to_gt: Vec<Option<usize>>,
    /// For each GT, the matched detection index.
    pub gt_to_detection: Vec<Option<usize>>,
}

/// Order in which detections are considered: score descending, then
/// instance id, then input position.
fn ranking(detections: &[InstanceDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.instance_id.cmp(&db.instance_id))
            .then(a.cmp(&b))
    });
    order
}

fn iou_matrix(
    detections: &[InstanceDetection],
    gts: &[GtInstance],
    mode: IouMode,
) -> Result<Vec<Vec<f64>>> {
    detections
        .iter()
        .map(|d| {
            let dm = match mode {
                IouMode::Amodal => d.amodal_mask(),
                IouMode::Visible => d.fg_mask.clone(),
            };
            gts.iter()
                .map(|g| {
                    if g.class_id != d.class_id {
                        return Ok(0.0);
                    }
                    match mode {
                        IouMode::Amodal => mask_iou(&dm, &g.amodal_mask),
                        IouMode::Visible => mask_iou(&dm, &g.visible_mask),
                    }
                })
                .collect()
        })
        .collect()
}

/// Greedy matching on a precomputed IoU matrix; `order` lists detections in
/// rank order. Cross-class entries are never matched.
fn greedy(
    ious: &[Vec<f64>],
    order: &[usize],
    det_class: &[usize],
    gt_class: &[usize],
    threshold: f64,
) -> Matching {
    let mut detection_to_gt = vec![None; det_class.len()];
    let mut gt_to_detection = vec![None; gt_class.len()];
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in ious[d].iter().enumerate() {
            if gt_to_detection[g].is_some() || gt_class[g] != det_class[d] || iou < threshold {
                continue;
            }
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            detection_to_gt[d] = Some(g);
            gt_to_detection[g] = Some(d);
        }
    }
    Matching {
        detection_to_gt,
        gt_to_detection,
    }
}

/// Greedy class-aware matching of one sample. Each detection, in rank
/// order, takes the unmatched same-class GT of highest IoU at or above the
/// threshold; equal IoUs go to the lower GT index.
pub fn match_detections(
    detections: &[InstanceDetection],
    gts: &[GtInstance],
    iou_threshold: f64,
    mode: IouMode,
) -> Result<Matching> {
    let ious = iou_matrix(detections, gts, mode)?;
    let det_class: Vec<usize> = detections.iter().map(|d| d.class_id).collect();
    let gt_class: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    Ok(greedy(
        &ious,
        &ranking(detections),
        &det_class,
        &gt_class,
        iou_threshold,
    ))
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    /// Stable key used to break score ties across images.
    pub key: usize,
    pub gts: Vec<GtInstance>,
    pub detections: Vec<InstanceDetection>,
}

/// Predictions for one dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub sample: usize,
    pub detections: Vec<InstanceDetection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub none: usize,
    pub partial: usize,
    pub heavy: usize,
}

impl CategoryCounts {
    fn add(&mut self, c: OcclusionCategory) {
        match c {
            OcclusionCategory::None => self.none += 1,
            OcclusionCategory::Partial => self.partial += 1,
            OcclusionCategory::Heavy => self.heavy += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub gt_count: usize,
    pub detection_count: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar100: Option<f64>,
}

/// Interpolated precision at the recall grid for one class and threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub iou_threshold: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Metrics are `None` when undefined (no ground truth in scope).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar100: Option<f64>,
    pub ar_none: Option<f64>,
    pub ar_partial: Option<f64>,
    pub ar_heavy: Option<f64>,
    pub per_class: Vec<ClassReport>,
    pub gt_counts: CategoryCounts,
    pub num_images: usize,
    pub num_detections: usize,
    #[serde(skip)]
    pub pr_curves: Vec<PrCurve>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Area under the interpolated precision envelope on `points` evenly spaced
/// recall levels. `tp` flags the ranked detections.
fn interpolated_precision(tp: &[bool], num_gt: usize, points: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (1..precision.len()).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }
    (0..points)
        .map(|i| {
            let r = i as f64 / (points - 1) as f64;
            let k = recall.partition_point(|&x| x < r);
            precision.get(k).copied().unwrap_or(0.0)
        })
        .collect()
}

struct PreparedImage {
    key: usize,
    gt_class: Vec<usize>,
    gt_category: Vec<OcclusionCategory>,
    det_class: Vec<usize>,
    det_score: Vec<f64>,
    /// Kept detections in rank order.
    order: Vec<usize>,
    ious: Vec<Vec<f64>>,
}

fn prepare(image: &ImageEval, config: &EvalConfig) -> Result<PreparedImage> {
    // Keep the best `max_detections` per class.
    let mut kept = Vec::new();
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for d in ranking(&image.detections) {
        let n = per_class.entry(image.detections[d].class_id).or_default();
        if *n < config.max_detections {
            *n += 1;
            kept.push(d);
        }
    }
    Ok(PreparedImage {
        key: image.key,
        gt_class: image.gts.iter().map(|g| g.class_id).collect(),
        gt_category: image.gts.iter().map(|g| g.category).collect(),
        det_class: image.detections.iter().map(|d| d.class_id).collect(),
        det_score: image.detections.iter().map(|d| d.score).collect(),
        order: kept,
        ious: iou_matrix(&image.detections, &image.gts, config.iou_mode)?,
    })
}

/// Evaluates already-paired images. Deterministic regardless of the order
/// of `images`, given distinct keys.
pub fn evaluate_images(images: &[ImageEval], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let mut prepared: Vec<PreparedImage> = images
        .par_iter()
        .map(|im| prepare(im, config))
        .collect::<Result<_>>()?;
    prepared.sort_by_key(|p| p.key);

    let mut classes: Vec<usize> = prepared
        .iter()
        .flat_map(|p| p.gt_class.iter().chain(&p.det_class).copied())
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut gt_counts = CategoryCounts::default();
    for p in &prepared {
        p.gt_category.iter().for_each(|&c| gt_counts.add(c));
    }

    // matchings[image][threshold]
    let thresholds = &config.iou_thresholds;
    let matchings: Vec<Vec<Matching>> = prepared
        .par_iter()
        .map(|p| {
            thresholds
                .iter()
                .map(|&t| greedy(&p.ious, &p.order, &p.det_class, &p.gt_class, t))
                .collect()
        })
        .collect();

    let categories = [
        OcclusionCategory::None,
        OcclusionCategory::Partial,
        OcclusionCategory::Heavy,
    ];
    let mut ap_cells = vec![Vec::new(); thresholds.len()];
    let mut ar_cells = vec![Vec::new(); thresholds.len()];
    let mut strat_cells = vec![vec![Vec::new(); thresholds.len()]; 3];
    let mut per_class = Vec::new();
    let mut pr_curves = Vec::new();
    let mut num_detections = 0;

    for &class in &classes {
        // Pooled ranking over the dataset: score, then image key, then rank
        // within the image.
        let mut pooled: Vec<(usize, usize)> = Vec::new();
        for (i, p) in prepared.iter().enumerate() {
            pooled.extend(
                p.order
                    .iter()
                    .filter(|&&d| p.det_class[d] == class)
                    .map(|&d| (i, d)),
            );
        }
        pooled.sort_by(|a, b| {
            prepared[b.0].det_score[b.1]
                .total_cmp(&prepared[a.0].det_score[a.1])
                .then(a.0.cmp(&b.0))
        });
        num_detections += pooled.len();
        let num_gt: usize = prepared
            .iter()
            .map(|p| p.gt_class.iter().filter(|&&c| c == class).count())
            .sum();
        let mut class_ap = Vec::new();
        let mut class_ar = Vec::new();
        for (t, &threshold) in thresholds.iter().enumerate() {
            if num_gt == 0 {
                continue;
            }
            let tp: Vec<bool> = pooled
                .iter()
                .map(|&(i, d)| matchings[i][t].detection_to_gt[d].is_some())
                .collect();
            let precision = interpolated_precision(&tp, num_gt, config.recall_points);
            let ap = precision.iter().sum::<f64>() / precision.len() as f64;
            let ar = tp.iter().filter(|&&x| x).count() as f64 / num_gt as f64;
            pr_curves.push(PrCurve {
                class_id: class,
                iou_threshold: threshold,
                recall: (0..config.recall_points)
                    .map(|i| i as f64 / (config.recall_points - 1) as f64)
                    .collect(),
                precision,
            });
            ap_cells[t].push(ap);
            ar_cells[t].push(ar);
            class_ap.push(ap);
            class_ar.push(ar);
            for (s, &cat) in categories.iter().enumerate() {
                let (mut hit, mut total) = (0usize, 0usize);
                for (i, p) in prepared.iter().enumerate() {
                    for g in 0..p.gt_class.len() {
                        if p.gt_class[g] == class && p.gt_category[g] == cat {
                            total += 1;
                            hit += matchings[i][t].gt_to_detection[g].is_some() as usize;
                        }
                    }
                }
                if total > 0 {
                    strat_cells[s][t].push(hit as f64 / total as f64);
                }
            }
        }
        let at = |v: f64| {
            config
                .threshold_index(v)
                .and_then(|t| (num_gt > 0).then(|| class_ap[t]))
        };
        per_class.push(ClassReport {
            class_id: class,
            gt_count: num_gt,
            detection_count: pooled.len(),
            ap: mean(class_ap.iter().copied()),
            ap50: at(0.5),
            ap75: at(0.75),
            ar100: mean(class_ar.iter().copied()),
        });
    }

    let at = |v: f64| {
        config
            .threshold_index(v)
            .and_then(|t| mean(ap_cells[t].iter().copied()))
    };
    // Same summation order for every recall average.
    let flat = |cells: &[Vec<f64>]| mean(cells.iter().flatten().copied());
    Ok(EvalReport {
        ap: mean(ap_cells.iter().flatten().copied()),
        ap50: at(0.5),
        ap75: at(0.75),
        ar100: flat(&ar_cells),
        ar_none: flat(&strat_cells[0]),
        ar_partial: flat(&strat_cells[1]),
        ar_heavy: flat(&strat_cells[2]),
        per_class,
        gt_counts,
        num_images: prepared.len(),
        num_detections,
        pr_curves,
    })
}

/// Evaluates predictions against generated samples. Predictions are paired
/// with samples by index, so their order does not matter.
pub fn evaluate(
    predictions: &[SamplePrediction],
    samples: &[Sample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if predictions.len() != samples.len() {
        return Err(Error::SampleCountMismatch {
            predictions: predictions.len(),
            samples: samples.len(),
        });
    }
    let by_index: BTreeMap<usize, &SamplePrediction> =
        predictions.iter().map(|p| (p.sample, p)).collect();
    let images = samples
        .iter()
        .map(|s| {
            let pred = by_index.get(&s.index).ok_or_else(|| Error::Sample {
                sample: s.index,
                message: "no prediction for sample".into(),
            })?;
            Ok(ImageEval {
                key: s.index,
                gts: ground_truth(s, &config.occlusion),
                detections: pred.detections.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_images(&images, config)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl EvalReport {
    /// `(name, value)` pairs of the headline metrics.
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("ap", self.ap),
            ("ap50", self.ap50),
            ("ap75", self.ap75),
            ("ar100", self.ar100),
            ("ar_none", self.ar_none),
            ("ar_partial", self.ar_partial),
            ("ar_heavy", self.ar_heavy),
        ]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Two-column `metric,value` table; undefined metrics are left blank.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.metrics() {
            out.push_str(&format!("{name},{}\n", fmt_opt(v)));
        }
        out.push_str(&format!("gt_none,{}\n", self.gt_counts.none));
        out.push_str(&format!("gt_partial,{}\n", self.gt_counts.partial));
        out.push_str(&format!("gt_heavy,{}\n", self.gt_counts.heavy));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "class_id,iou_threshold,recall,precision")?;
            for c in &self.pr_curves {
                for (r, p) in c.recall.iter().zip(&c.precision) {
                    writeln!(w, "{},{:.2},{r:.2},{p:.6}", c.class_id, c.iou_threshold)?;
                }
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Adjusted Rand index between two labelings of the same items.
/// Returns 1.0 when both labelings are trivially identical partitions.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "labelings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let pairs = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let mut table: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests;
