//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use layered_amodal::cluster::InstanceDetection;
use layered_amodal::eval::GtInstance;
use layered_amodal::losscore::{
    kink_signature, loss_gradient, total_loss, FeatureMap, InstanceRegions, LossConfig, LossInputs,
};
use layered_amodal::net::train::sample_gradient;
use layered_amodal::net::{image_tensor, ArchConfig, Predictor};
use layered_amodal::raster::{Grid, LabelMap, Mask};
use layered_amodal::scenegen::{generate_sample, Sample, SceneConfig};
use rand::RngExt;

/// The tiny network used for end-to-end gradient checks: two trunk layers
/// of width 4 on a 32x32 canvas.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        canvas_size: 32,
        label_size: 16,
        num_classes: 3,
        embed_dim: 3,
        block_widths: vec![4, 4],
        convs_per_block: 1,
        fuse_width: 4,
        fuse_kernel: 3,
        head_widths: vec![4],
        coord_channels: false,
    }
}

pub fn tiny_sample(seed: u64) -> Sample {
    let cfg = SceneConfig {
        instances_per_class: 1,
        canvas_size: 32,
        label_size: 16,
        shape_scale: 8.0,
        outline_width: 1.5,
        min_visible_pixels: 3,
        seed,
        ..SceneConfig::default()
    };
    generate_sample(&cfg, 0).unwrap()
}

/// Loss value plus the sign patterns of every kink it passes through.
fn loss_and_signature(
    model: &Predictor<f64>,
    sample: &Sample,
    cfg: &LossConfig,
) -> (f64, Vec<bool>, Vec<i8>) {
    let r = &sample.rendered;
    let (heads, cache) = model.forward(&image_tensor(&r.image)).unwrap();
    let maps = heads.to_maps();
    let class_of: Vec<usize> = (0..r.num_instances())
        .map(|n| sample.scene.class_of(n))
        .collect();
    let regions =
        InstanceRegions::from_label_maps(&r.fg_instance, &r.occ_instance, &class_of).unwrap();
    let inputs = LossInputs {
        fg_embed: &maps.fg_embed,
        occ_embed: &maps.occ_embed,
        fg_logits: &maps.fg_logits,
        occ_logits: &maps.occ_logits,
        regions: &regions,
        fg_class: &r.fg_class,
        occ_class: &r.occ_class,
    };
    let loss = total_loss(&inputs, cfg).unwrap().total;
    let kinks = kink_signature(&maps.fg_embed, &maps.occ_embed, &regions, cfg).unwrap();
    (loss, cache.relu_signature(), kinks)
}

/// Backpropagation against central differences on `count` random
/// parameters. Returns (worst relative error, parameters compared).
/// Parameters whose stencil flips any ReLU or loss kink are skipped.
pub fn network_gradient_check(seed: u64, count: usize) -> (f64, usize) {
    let sample = tiny_sample(seed);
    let cfg = LossConfig::default();
    let mut model = Predictor::<f64>::init(&tiny_arch(), seed).unwrap();
    // Nonzero biases so no unit sits exactly at its kink.
    let mut rng = layered_amodal::rng::stream(seed ^ 0xb1a5);
    for layer in model.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let (_, grads) = sample_gradient(&model, &sample, &cfg).unwrap();
    let (_, relu0, kinks0) = loss_and_signature(&model, &sample, &cfg);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let sizes: Vec<(usize, usize)> = model
        .layers()
        .iter()
        .map(|l| (l.weight.len(), l.bias.len()))
        .collect();
    for _ in 0..count {
        let li = rng.random_range(0..sizes.len());
        let is_bias = rng.random_bool(0.2);
        let len = if is_bias { sizes[li].1 } else { sizes[li].0 };
        let i = rng.random_range(0..len);
        let analytic = if is_bias {
            grads.layers[li].1[i]
        } else {
            grads.layers[li].0[i]
        };
        let eval_at = |delta: f64| {
            let mut m = model.clone();
            let layer = &mut m.layers_mut()[li];
            let slot = if is_bias {
                &mut layer.bias[i]
            } else {
                &mut layer.weight[i]
            };
            *slot += delta;
            loss_and_signature(&m, &sample, &cfg)
        };
        let (plus, relu_p, kinks_p) = eval_at(h);
        let (minus, relu_m, kinks_m) = eval_at(-h);
        if relu_p != relu0 || relu_m != relu0 || kinks_p != kinks0 || kinks_m != kinks0 {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, checked)
}

/// Detection with its whole mask in the foreground layer.
pub fn detection(id: usize, class: usize, score: f64, mask: Mask) -> InstanceDetection {
    let empty = Mask::filled(mask.width, mask.height, false);
    InstanceDetection {
        instance_id: id,
        class_id: class,
        fg_mask: mask,
        occ_mask: empty,
        score,
    }
}

fn iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(x, y)| **x && **y)
        .count();
    let union = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(x, y)| **x || **y)
        .count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// All partial injective maps from `nd` detections into `ng` GTs.
fn all_matchings(nd: usize, ng: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![Vec::new()];
    for _ in 0..nd {
        let mut next = Vec::new();
        for m in &out {
            next.push([m.clone(), vec![None]].concat());
            for g in 0..ng {
                if !m.contains(&Some(g)) {
                    next.push([m.clone(), vec![Some(g)]].concat());
                }
            }
        }
        out = next;
    }
    out
}

/// The matching is rank-consistent when every detection, in rank order,
/// holds the best same-class GT (by IoU, then lower index) at or above the
/// threshold among those not held by better-ranked detections, and holds
/// nothing when no such GT remains.
fn rank_consistent(
    m: &[Option<usize>],
    rank: &[usize],
    dets: &[InstanceDetection],
    gts: &[GtInstance],
    t: f64,
) -> bool {
    let mut taken = vec![false; gts.len()];
    for &d in rank {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != dets[d].class_id {
                continue;
            }
            let v = iou(&dets[d].amodal_mask(), &gt.amodal_mask);
            if v >= t && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if m[d] != best.map(|(g, _)| g) {
            return false;
        }
        if let Some(g) = m[d] {
            taken[g] = true;
        }
    }
    true
}

/// One image of the brute-force problem.
pub struct OracleImage {
    pub dets: Vec<InstanceDetection>,
    pub gts: Vec<GtInstance>,
}

/// (AP, AR) by exhaustive enumeration, averaged over classes with ground
/// truth and over thresholds; `None` without ground truth. Precision at each
/// recall level is the best precision at any cutoff reaching that recall.
pub fn brute_force_ap_ar(
    images: &[OracleImage],
    thresholds: &[f64],
    points: usize,
) -> (Option<f64>, Option<f64>) {
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|im| im.gts.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let (mut aps, mut ars) = (Vec::new(), Vec::new());
    for &t in thresholds {
        // Matching per image.
        let matches: Vec<Vec<Option<usize>>> = images
            .iter()
            .map(|im| {
                let mut rank: Vec<usize> = (0..im.dets.len()).collect();
                rank.sort_by(|&a, &b| {
                    im.dets[b]
                        .score
                        .total_cmp(&im.dets[a].score)
                        .then(im.dets[a].instance_id.cmp(&im.dets[b].instance_id))
                });
                let found: Vec<_> = all_matchings(im.dets.len(), im.gts.len())
                    .into_iter()
                    .filter(|m| rank_consistent(m, &rank, &im.dets, &im.gts, t))
                    .collect();
                assert_eq!(found.len(), 1, "exactly one rank-consistent matching");
                found.into_iter().next().unwrap()
            })
            .collect();
        for &class in &classes {
            let num_gt = images
                .iter()
                .flat_map(|im| &im.gts)
                .filter(|g| g.class_id == class)
                .count();
            // Pooled ranking: score, image, instance id.
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
            for (i, im) in images.iter().enumerate() {
                for (d, det) in im.dets.iter().enumerate() {
                    if det.class_id == class {
                        pooled.push((det.score, i, det.instance_id, matches[i][d].is_some()));
                    }
                }
            }
            pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let cutoffs: Vec<(f64, f64)> = (1..=pooled.len())
                .map(|k| {
                    let tp = pooled[..k].iter().filter(|p| p.3).count() as f64;
                    (tp / num_gt as f64, tp / k as f64)
                })
                .collect();
            let ap = (0..points)
                .map(|i| {
                    let r = i as f64 / (points - 1) as f64;
                    cutoffs
                        .iter()
                        .filter(|c| c.0 >= r)
                        .map(|c| c.1)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / points as f64;
            let tp = pooled.iter().filter(|p| p.3).count() as f64;
            aps.push(ap);
            ars.push(tp / num_gt as f64);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (mean(&aps), mean(&ars))
}

/// Random 8x8 loss problem: `c` embedding channels, `instances` spread over
/// `classes`, random embeddings and logits.
pub struct LossProblem {
    pub maps: [FeatureMap; 4],
    pub regions: InstanceRegions,
    pub fg_class: LabelMap,
    pub occ_class: LabelMap,
}

impl LossProblem {
    pub fn random(seed: u64, c: usize, instances: usize, classes: usize) -> Self {
        let mut rng = layered_amodal::rng::stream(seed);
        let (h, w) = (8, 8);
        let mut fg = vec![0u16; h * w];
        let mut occ = vec![0u16; h * w];
        for p in 0..h * w {
            let top = rng.random_range(0..=instances);
            fg[p] = top as u16;
            let other = rng.random_range(1..=instances);
            if top > 0 && other != top && rng.random_bool(0.4) {
                occ[p] = other as u16;
            }
        }
        for i in 0..instances {
            fg[i] = i as u16 + 1;
        }
        let class_of: Vec<usize> = (0..instances).map(|i| i % classes).collect();
        let grid = |v: Vec<u16>| Grid::from_vec(w, h, v).unwrap();
        let to_class = |v: &[u16]| {
            grid(
                v.iter()
                    .map(|&i| {
                        if i == 0 {
                            0
                        } else {
                            class_of[i as usize - 1] as u16 + 1
                        }
                    })
                    .collect(),
            )
        };
        let (fg_class, occ_class) = (to_class(&fg), to_class(&occ));
        let regions = InstanceRegions::from_label_maps(&grid(fg), &grid(occ), &class_of).unwrap();
        let mut random_map = |ch: usize, scale: f64| {
            let mut m = FeatureMap::zeros(h, w, ch);
            m.data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..scale));
            m
        };
        let maps = [
            random_map(c, 1.5),
            random_map(c, 1.5),
            random_map(classes + 1, 2.0),
            random_map(classes + 1, 2.0),
        ];
        Self {
            maps,
            regions,
            fg_class,
            occ_class,
        }
    }

    fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            fg_embed: &self.maps[0],
            occ_embed: &self.maps[1],
            fg_logits: &self.maps[2],
            occ_logits: &self.maps[3],
            regions: &self.regions,
            fg_class: &self.fg_class,
            occ_class: &self.occ_class,
        }
    }

    fn signature(&self, cfg: &LossConfig) -> Vec<i8> {
        kink_signature(&self.maps[0], &self.maps[1], &self.regions, cfg).unwrap()
    }
}

/// Analytic loss gradient against central differences (step `h`) on every
/// input coordinate whose stencil crosses no kink. Returns (worst relative
/// error, coordinates compared).
pub fn loss_gradient_check(p: &mut LossProblem, cfg: &LossConfig, h: f64) -> (f64, usize) {
    let (_, g) = loss_gradient(&p.inputs(), cfg).unwrap();
    let analytic = [g.fg_embed, g.occ_embed, g.fg_logits, g.occ_logits];
    let base = p.signature(cfg);
    let (mut worst, mut checked) = (0.0f64, 0);
    for m in 0..4 {
        for i in 0..p.maps[m].data.len() {
            let orig = p.maps[m].data[i];
            let mut at = |v: f64| {
                p.maps[m].data[i] = v;
                (
                    total_loss(&p.inputs(), cfg).unwrap().total,
                    p.signature(cfg),
                )
            };
            let (plus, sp) = at(orig + h);
            let (minus, sm) = at(orig - h);
            p.maps[m].data[i] = orig;
            if sp != base || sm != base {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[m].data[i];
            checked += 1;
            if a == 0.0 && numeric.abs() < 1e-10 {
                continue;
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    (worst, checked)
}
