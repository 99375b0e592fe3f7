//! Iterative mean-shift grouping of layered embeddings into instances.
//!
//! Foreground-layer and occlusion-layer pixels that the semantic heads mark
//! as occupied form one point set in embedding space. A random unlabeled
//! point seeds a group; the group is every unlabeled point within
//! `bandwidth` (L1) of the running mean, and the mean is recomputed until
//! the membership stops changing. Because both layers share the point set, a
//! cluster can own visible and hidden pixels alike, which is what ties an
//! occluded region to the visible instance it belongs to.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::losscore::EmbeddingMap;
use crate::raster::{Grid, LabelMap, Mask};
use crate::rle;
use crate::rng;
use crate::{Error, Result};

/// How the two layers enter the clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Both layers form one point set.
    Joint,
    /// Cluster foreground pixels, then attach each occluded pixel to the
    /// nearest cluster mean within `bandwidth`.
    ForegroundFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub bandwidth: f64,
    pub max_iterations: usize,
    pub min_cluster_pixels: usize,
    pub seed: u64,
    /// Cluster each semantic class separately; embeddings of different
    /// classes are not pushed apart by the loss.
    pub per_class: bool,
    pub layer_mode: LayerMode,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.5,
            max_iterations: 100,
            min_cluster_pixels: 3,
            seed: 0,
            per_class: true,
            layer_mode: LayerMode::Joint,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidConfig("bandwidth must be positive".into()));
        }
        Ok(())
    }
}

/// Cluster labels per layer: 0 is unlabeled, `l > 0` is cluster `l - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub fg_labels: Grid<u32>,
    pub occ_labels: Grid<u32>,
    pub means: Vec<Vec<f64>>,
    /// Masked pixels left unassigned (groups below `min_cluster_pixels`).
    pub unassigned: usize,
}

#[derive(Debug, Clone, Copy)]
struct Point {
    layer: u8,
    pixel: usize,
    class: u16,
}

fn embedding<'a>(fg: &'a EmbeddingMap, occ: &'a EmbeddingMap, p: &Point) -> &'a [f64] {
    if p.layer == 0 {
        fg.pixel(p.pixel)
    } else {
        occ.pixel(p.pixel)
    }
}

#[inline]
fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn mean_of(fg: &EmbeddingMap, occ: &EmbeddingMap, points: &[Point], members: &[usize]) -> Vec<f64> {
    let mut mu = vec![0.0; fg.channels];
    for &i in members {
        for (m, e) in mu.iter_mut().zip(embedding(fg, occ, &points[i])) {
            *m += e;
        }
    }
    let inv = 1.0 / members.len() as f64;
    mu.iter_mut().for_each(|m| *m *= inv);
    mu
}

/// Groups semantically-gated pixels of both layers into instances.
pub fn cluster_embeddings(
    fg_embed: &EmbeddingMap,
    occ_embed: &EmbeddingMap,
    fg_sem: &LabelMap,
    occ_sem: &LabelMap,
    config: &ClusterConfig,
) -> Result<ClusterResult> {
    config.validate()?;
    let n = fg_embed.num_pixels();
    if occ_embed.num_pixels() != n
        || occ_embed.channels != fg_embed.channels
        || fg_sem.len() != n
        || occ_sem.len() != n
    {
        return Err(Error::ShapeMismatch(
            "embeddings and semantic maps must share a resolution".into(),
        ));
    }
    let (w, h) = (fg_sem.width, fg_sem.height);
    let mut fg_labels = Grid::filled(w, h, 0u32);
    let mut occ_labels = Grid::filled(w, h, 0u32);
    let mut means = Vec::new();
    let mut unassigned = 0;
    let mut rng = rng::stream(config.seed);

    let gather = |layer: u8, sem: &LabelMap| -> Vec<Point> {
        sem.data
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(pixel, &class)| Point {
                layer,
                pixel,
                class,
            })
            .collect()
    };
    let fg_points = gather(0, fg_sem);
    let occ_points = gather(1, occ_sem);
    let seeds: Vec<Point> = match config.layer_mode {
        LayerMode::Joint => fg_points.iter().chain(&occ_points).copied().collect(),
        LayerMode::ForegroundFirst => fg_points.clone(),
    };

    let mut classes: Vec<u16> = seeds
        .iter()
        .map(|p| if config.per_class { p.class } else { 0 })
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut cluster_class = Vec::new();
    for class in classes {
        let points: Vec<Point> = seeds
            .iter()
            .filter(|p| !config.per_class || p.class == class)
            .copied()
            .collect();
        let mut labeled = vec![false; points.len()];
        let mut unlabeled: Vec<usize> = (0..points.len()).collect();
        let within = |mu: &[f64], unlabeled: &[usize]| -> Vec<usize> {
            unlabeled
                .iter()
                .copied()
                .filter(|&i| l1(mu, embedding(fg_embed, occ_embed, &points[i])) <= config.bandwidth)
                .collect()
        };
        while !unlabeled.is_empty() {
            let seed = unlabeled[rng.random_range(0..unlabeled.len())];
            let mut members = within(embedding(fg_embed, occ_embed, &points[seed]), &unlabeled);
            let mut mu = mean_of(fg_embed, occ_embed, &points, &members);
            for _ in 0..config.max_iterations {
                let next = within(&mu, &unlabeled);
                if next.is_empty() || next == members {
                    break;
                }
                members = next;
                mu = mean_of(fg_embed, occ_embed, &points, &members);
            }
            for &i in &members {
                labeled[i] = true;
            }
            unlabeled.retain(|&i| !labeled[i]);
            if members.len() < config.min_cluster_pixels {
                unassigned += members.len();
                continue;
            }
            means.push(mu);
            cluster_class.push(class);
            let label = means.len() as u32;
            for &i in &members {
                let p = points[i];
                if p.layer == 0 {
                    fg_labels.data[p.pixel] = label;
                } else {
                    occ_labels.data[p.pixel] = label;
                }
            }
        }
    }

    if config.layer_mode == LayerMode::ForegroundFirst {
        for p in &occ_points {
            let e = occ_embed.pixel(p.pixel);
            let best = means
                .iter()
                .enumerate()
                .filter(|(l, _)| !config.per_class || cluster_class[*l] == p.class)
                .map(|(l, mu)| (l, l1(mu, e)))
                .filter(|&(_, d)| d <= config.bandwidth)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((l, _)) => occ_labels.data[p.pixel] = l as u32 + 1,
                None => unassigned += 1,
            }
        }
    }

    Ok(ClusterResult {
        fg_labels,
        occ_labels,
        means,
        unassigned,
    })
}

/// One recovered instance with its per-layer masks.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDetection {
    pub instance_id: usize,
    pub class_id: usize,
    pub fg_mask: Mask,
    pub occ_mask: Mask,
    pub score: f64,
}

impl InstanceDetection {
    pub fn amodal_mask(&self) -> Mask {
        self.fg_mask.union(&self.occ_mask)
    }
}

/// Turns clusters into detections: class by majority vote of the semantic
/// labels under the cluster (ties to the lower class), score by embedding
/// compactness `mean_p max(0, 1 - |E(p) - mu|_1 / bandwidth)`.
pub fn assemble_detections(
    result: &ClusterResult,
    fg_embed: &EmbeddingMap,
    occ_embed: &EmbeddingMap,
    fg_sem: &LabelMap,
    occ_sem: &LabelMap,
    config: &ClusterConfig,
) -> Vec<InstanceDetection> {
    let (w, h) = (result.fg_labels.width, result.fg_labels.height);
    let num_classes = fg_sem
        .data
        .iter()
        .chain(&occ_sem.data)
        .copied()
        .max()
        .unwrap_or(0) as usize;
    result
        .means
        .iter()
        .enumerate()
        .map(|(i, mu)| {
            let label = i as u32 + 1;
            let mut votes = vec![0usize; num_classes + 1];
            let mut score = 0.0;
            let mut count = 0usize;
            let mut masks = [Mask::filled(w, h, false), Mask::filled(w, h, false)];
            for (layer, (labels, sem, embed)) in [
                (&result.fg_labels, fg_sem, fg_embed),
                (&result.occ_labels, occ_sem, occ_embed),
            ]
            .into_iter()
            .enumerate()
            {
                for (p, &l) in labels.data.iter().enumerate() {
                    if l != label {
                        continue;
                    }
                    masks[layer].data[p] = true;
                    votes[sem.data[p] as usize] += 1;
                    score += (1.0 - l1(embed.pixel(p), mu) / config.bandwidth).max(0.0);
                    count += 1;
                }
            }
            let mut best = 1;
            for v in 2..votes.len() {
                if votes[v] > votes[best] {
                    best = v;
                }
            }
            let class_id = best - 1;
            let [fg_mask, occ_mask] = masks;
            InstanceDetection {
                instance_id: i,
                class_id,
                fg_mask,
                occ_mask,
                score: if count == 0 {
                    0.0
                } else {
                    score / count as f64
                },
            }
        })
        .collect()
}

/// Serialised detection with run-length-encoded masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub instance_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub width: usize,
    pub height: usize,
    pub fg_rle: Vec<u32>,
    pub occ_rle: Vec<u32>,
}

impl From<&InstanceDetection> for DetectionRecord {
    fn from(d: &InstanceDetection) -> Self {
        Self {
            instance_id: d.instance_id,
            class_id: d.class_id,
            score: d.score,
            width: d.fg_mask.width,
            height: d.fg_mask.height,
            fg_rle: rle::encode(&d.fg_mask),
            occ_rle: rle::encode(&d.occ_mask),
        }
    }
}

impl DetectionRecord {
    pub fn to_detection(&self) -> Result<InstanceDetection> {
        Ok(InstanceDetection {
            instance_id: self.instance_id,
            class_id: self.class_id,
            score: self.score,
            fg_mask: rle::decode(&self.fg_rle, self.width, self.height)?,
            occ_mask: rle::decode(&self.occ_rle, self.width, self.height)?,
        })
    }
}
