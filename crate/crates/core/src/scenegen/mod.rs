//! Synthetic occluded-shapes scenes with exact layered ground truth.
//!
//! A [`Scene`] is a set of posed shapes with a total depth order. Rasterising
//! it yields an outline-only input image plus label maps for the two topmost
//! layers at every pixel, and the full (amodal) mask of every instance.

mod dataset;
pub mod geometry;

use rand::seq::SliceRandom;
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{read_dataset, write_dataset, Dataset, FORMAT_VERSION};
pub use geometry::{PreparedShape, Shape, ShapeKind};

use crate::raster::{GrayImage, LabelMap, Mask};
use crate::rng;
use crate::{Error, Result};

/// Subsamples per canvas pixel along each axis when anti-aliasing the image.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub classes: Vec<ShapeKind>,
    pub instances_per_class: usize,
    pub canvas_size: usize,
    pub label_size: usize,
    /// Circumradius of every shape, in canvas pixels.
    pub shape_scale: f64,
    pub outline_width: f64,
    /// Minimum visible area per instance, in label pixels.
    pub min_visible_pixels: usize,
    pub max_resample_rounds: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: vec![ShapeKind::Triangle, ShapeKind::Rectangle, ShapeKind::Circle],
            instances_per_class: 6,
            canvas_size: 256,
            label_size: 64,
            shape_scale: 45.0,
            outline_width: 3.0,
            min_visible_pixels: 5,
            max_resample_rounds: 1000,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_instances(&self) -> usize {
        self.classes.len() * self.instances_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes.is_empty() {
            return fail("classes must be nonempty");
        }
        if self.instances_per_class == 0 {
            return fail("instances_per_class must be at least 1");
        }
        if self.label_size == 0 || self.canvas_size == 0 || self.canvas_size % self.label_size != 0
        {
            return fail("canvas_size must be a positive multiple of label_size");
        }
        if self.num_instances() >= u16::MAX as usize {
            return fail("too many instances for 16-bit label maps");
        }
        if !(self.shape_scale > 0.0) || !(self.outline_width >= 0.0) {
            return fail("shape_scale must be positive and outline_width nonnegative");
        }
        if self.min_visible_pixels == 0 {
            return fail("min_visible_pixels must be at least 1");
        }
        Ok(())
    }

    /// Copy of this config with the seed of dataset sample `index`.
    pub fn for_sample(&self, index: usize) -> SceneConfig {
        SceneConfig {
            seed: rng::split(self.seed, index as u64),
            ..self.clone()
        }
    }
}

/// Boundaries of the occlusion-rate categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionThresholds {
    pub partial_max: f64,
}

impl Default for OcclusionThresholds {
    fn default() -> Self {
        Self { partial_max: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OcclusionCategory {
    None,
    Partial,
    Heavy,
}

impl OcclusionThresholds {
    pub fn categorize(&self, q: f64) -> OcclusionCategory {
        if q <= 0.0 {
            OcclusionCategory::None
        } else if q <= self.partial_max {
            OcclusionCategory::Partial
        } else {
            OcclusionCategory::Heavy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub instance_id: usize,
    pub class_id: usize,
    pub kind: ShapeKind,
    pub center: [f64; 2],
    pub orientation: f64,
    pub radius: f64,
    /// 0 is topmost.
    pub depth_rank: usize,
}

impl ShapeInstance {
    pub fn shape(&self) -> Shape {
        Shape {
            kind: self.kind,
            center: self.center,
            radius: self.radius,
            orientation: self.orientation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas_size: usize,
    pub label_size: usize,
    pub num_classes: usize,
    /// Indexed by `instance_id`.
    pub instances: Vec<ShapeInstance>,
}

impl Scene {
    /// Instance ids from topmost to deepest.
    pub fn depth_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.instances.len()).collect();
        order.sort_by_key(|&i| self.instances[i].depth_rank);
        order
    }

    pub fn class_of(&self, instance: usize) -> usize {
        self.instances[instance].class_id
    }

    /// Per label pixel, the covering instance ids sorted top to bottom.
    pub fn cover_stacks(&self) -> CoverStacks {
        let order = self.depth_order();
        let prepared: Vec<PreparedShape> = order
            .iter()
            .map(|&i| PreparedShape::new(self.instances[i].shape()))
            .collect();
        let size = self.label_size;
        let f = self.canvas_size as f64 / size as f64;
        let mut stacks = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let p = [(x as f64 + 0.5) * f, (y as f64 + 0.5) * f];
                let stack: Vec<u16> = order
                    .iter()
                    .zip(&prepared)
                    .filter(|(_, s)| s.contains(p))
                    .map(|(&i, _)| i as u16)
                    .collect();
                stacks.push(stack);
            }
        }
        CoverStacks { size, stacks }
    }
}

/// Depth-sorted cover sets at label resolution.
#[derive(Debug, Clone)]
pub struct CoverStacks {
    pub size: usize,
    pub stacks: Vec<Vec<u16>>,
}

impl CoverStacks {
    pub fn visible_counts(&self, num_instances: usize) -> Vec<usize> {
        let mut counts = vec![0; num_instances];
        for s in &self.stacks {
            if let Some(&top) = s.first() {
                counts[top as usize] += 1;
            }
        }
        counts
    }

    /// Mask of pixels where each instance is among the top `layers` covers.
    pub fn layered_masks(&self, num_instances: usize, layers: usize) -> Vec<Mask> {
        let mut masks = vec![Mask::filled(self.size, self.size, false); num_instances];
        for (p, s) in self.stacks.iter().enumerate() {
            for &id in s.iter().take(layers) {
                masks[id as usize].data[p] = true;
            }
        }
        masks
    }

    pub fn max_depth(&self) -> usize {
        self.stacks.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image: GrayImage,
    pub fg_class: LabelMap,
    pub occ_class: LabelMap,
    pub fg_instance: LabelMap,
    pub occ_instance: LabelMap,
    /// Indexed by instance id.
    pub amodal_masks: Vec<Mask>,
    pub occlusion_fraction: Vec<f64>,
}

impl RenderedSample {
    pub fn num_instances(&self) -> usize {
        self.amodal_masks.len()
    }

    /// Visible (topmost-layer) mask of one instance.
    pub fn visible_mask(&self, instance: usize) -> Mask {
        self.fg_instance.mask_of(instance)
    }
}

/// One generated dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub scene: Scene,
    pub rendered: RenderedSample,
}

/// Draws a scene from `config` (seeded by `config.seed`).
///
/// Instance ids are class-major: class 0 owns ids `0..n_k`, and so on. The
/// initial placement uses stream `split(seed, 0)`; whenever some instance
/// has fewer than `min_visible_pixels` visible label pixels, resampling round
/// `r` redraws the pose of just those instances from stream `split(seed, r)`.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let n = config.num_instances();
    let canvas = config.canvas_size as f64;
    let mut rng0 = rng::stream(rng::split(config.seed, 0));

    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(&mut rng0);

    let draw_pose = |r: &mut rand_pcg::Pcg64| -> ([f64; 2], f64) {
        let x = r.random::<f64>() * canvas;
        let y = r.random::<f64>() * canvas;
        let theta = r.random::<f64>() * std::f64::consts::TAU;
        ([x, y], theta)
    };

    let mut instances = Vec::with_capacity(n);
    for id in 0..n {
        let class_id = id / config.instances_per_class;
        let (center, orientation) = draw_pose(&mut rng0);
        instances.push(ShapeInstance {
            instance_id: id,
            class_id,
            kind: config.classes[class_id],
            center,
            orientation,
            radius: config.shape_scale,
            depth_rank: ranks[id],
        });
    }
    let mut scene = Scene {
        canvas_size: config.canvas_size,
        label_size: config.label_size,
        num_classes: config.num_classes(),
        instances,
    };

    for round in 0..=config.max_resample_rounds {
        let counts = scene.cover_stacks().visible_counts(n);
        let offending: Vec<usize> = (0..n)
            .filter(|&i| counts[i] < config.min_visible_pixels)
            .collect();
        if offending.is_empty() {
            return Ok(scene);
        }
        if round == config.max_resample_rounds {
            break;
        }
        let mut r = rng::stream(rng::split(config.seed, round as u64 + 1));
        for i in offending {
            let (center, orientation) = draw_pose(&mut r);
            scene.instances[i].center = center;
            scene.instances[i].orientation = orientation;
        }
    }
    Err(Error::SceneInfeasible {
        rounds: config.max_resample_rounds,
    })
}

/// Renders the outline image and the layered label maps of a scene.
pub fn rasterize_scene(scene: &Scene, config: &SceneConfig) -> RenderedSample {
    let image = render_image(scene, config.outline_width);
    let (fg_class, occ_class, fg_instance, occ_instance, amodal_masks) = label_maps(scene);
    let occlusion_fraction = occlusion_fractions(&fg_instance, &amodal_masks);
    RenderedSample {
        image,
        fg_class,
        occ_class,
        fg_instance,
        occ_instance,
        amodal_masks,
        occlusion_fraction,
    }
}

/// For each instance, the pixels where it is among the top `layers` covers.
/// `layers = 1` gives visible masks; `layers >= N` gives amodal masks.
pub fn layered_gt_masks(scene: &Scene, layers: usize) -> Vec<Mask> {
    scene
        .cover_stacks()
        .layered_masks(scene.instances.len(), layers.max(1))
}

/// Generates and rasterises samples `0..count` of a dataset.
pub fn generate_dataset(config: &SceneConfig, count: usize) -> Result<Vec<Sample>> {
    generate_range(config, 0..count)
}

pub fn generate_range(config: &SceneConfig, range: std::ops::Range<usize>) -> Result<Vec<Sample>> {
    config.validate()?;
    range
        .into_par_iter()
        .map(|index| generate_sample(config, index))
        .collect()
}

pub fn generate_sample(config: &SceneConfig, index: usize) -> Result<Sample> {
    let sample_config = config.for_sample(index);
    let scene = generate_scene(&sample_config)?;
    let rendered = rasterize_scene(&scene, config);
    Ok(Sample {
        index,
        scene,
        rendered,
    })
}

fn render_image(scene: &Scene, outline_width: f64) -> GrayImage {
    let size = scene.canvas_size;
    let prepared: Vec<PreparedShape> = scene
        .depth_order()
        .into_iter()
        .map(|i| PreparedShape::new(scene.instances[i].shape()))
        .collect();
    let half = outline_width / 2.0;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let data: Vec<u8> = (0..size)
        .into_par_iter()
        .flat_map_iter(|y| {
            let prepared = &prepared;
            (0..size).map(move |x| {
                let mut dark = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let p = [
                            x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                            y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                        ];
                        if is_outline(prepared, p, half) {
                            dark += 1;
                        }
                    }
                }
                (255.0 * (1.0 - dark as f64 / total)).round() as u8
            })
        })
        .collect();
    GrayImage {
        width: size,
        height: size,
        data,
    }
}

/// Walks shapes top-down: a stroke hit darkens the point; an interior hit
/// hides everything deeper.
fn is_outline(depth_sorted: &[PreparedShape], p: [f64; 2], half_width: f64) -> bool {
    for s in depth_sorted {
        if !s.shape.within(p, half_width) {
            continue;
        }
        let d = s.signed_distance(p);
        if d.abs() <= half_width {
            return true;
        }
        if d < 0.0 {
            return false;
        }
    }
    false
}

type LayerMaps = (LabelMap, LabelMap, LabelMap, LabelMap, Vec<Mask>);

fn label_maps(scene: &Scene) -> LayerMaps {
    let n = scene.instances.len();
    let stacks = scene.cover_stacks();
    let size = stacks.size;
    let mut fg_class = LabelMap::filled(size, size, 0);
    let mut occ_class = fg_class.clone();
    let mut fg_instance = fg_class.clone();
    let mut occ_instance = fg_class.clone();
    for (p, s) in stacks.stacks.iter().enumerate() {
        if let Some(&top) = s.first() {
            fg_instance.data[p] = top + 1;
            fg_class.data[p] = scene.class_of(top as usize) as u16 + 1;
        }
        if let Some(&second) = s.get(1) {
            occ_instance.data[p] = second + 1;
            occ_class.data[p] = scene.class_of(second as usize) as u16 + 1;
        }
    }
    let amodal = stacks.layered_masks(n, usize::MAX);
    (fg_class, occ_class, fg_instance, occ_instance, amodal)
}

fn occlusion_fractions(fg_instance: &LabelMap, amodal: &[Mask]) -> Vec<f64> {
    let mut visible = vec![0usize; amodal.len()];
    for &v in &fg_instance.data {
        if v > 0 {
            visible[v as usize - 1] += 1;
        }
    }
    amodal
        .iter()
        .zip(visible)
        .map(|(m, v)| {
            let a = m.count();
            if a == 0 {
                1.0
            } else {
                1.0 - v as f64 / a as f64
            }
        })
        .collect()
}
