//! Ideal head outputs built from ground truth.
//!
//! Each instance gets a target embedding from a lattice; every pixel it owns
//! in either layer carries that target plus optional Gaussian noise, and the
//! semantic heads are one-hot logits of the true label maps. This stands in
//! for a trained network when validating clustering and evaluation, and
//! models a capacity-limited one in the bounded layout.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HeadMaps;
use crate::losscore::FeatureMap;
use crate::raster::LabelMap;
use crate::rng;
use crate::scenegen::{RenderedSample, Scene};
use crate::{Error, Result};

/// How instance targets are laid out in embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetLayout {
    /// Integer lattice with spacing `2 * d_dst` and `levels_per_axis`
    /// points per axis. Any two targets are at least `2 * d_dst` apart (L1);
    /// classes with more instances than `levels_per_axis^C` are rejected.
    Separated { levels_per_axis: usize },
    /// The smallest cubic lattice holding every instance, shrunk as needed
    /// to fit in `[-half_extent, half_extent]^C`. Crowding in low
    /// dimensions pushes targets closer than the clustering radius.
    Bounded { half_extent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub embed_dim: usize,
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
    /// Divide `sigma` by the embedding dimension so the expected L1 size
    /// of the noise does not grow with it.
    pub normalize_noise: bool,
    pub seed: u64,
    pub logit_margin: f64,
    pub d_dst: f64,
    pub layout: TargetLayout,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            embed_dim: 6,
            sigma: 0.0,
            normalize_noise: false,
            seed: 0,
            logit_margin: 10.0,
            d_dst: 1.5,
            layout: TargetLayout::Separated { levels_per_axis: 4 },
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig("sigma must be finite and >= 0".into()));
        }
        if self.embed_dim == 0 || !(self.d_dst > 0.0) {
            return Err(Error::InvalidConfig(
                "embed_dim and d_dst must be positive".into(),
            ));
        }
        match self.layout {
            TargetLayout::Separated { levels_per_axis } if levels_per_axis == 0 => Err(
                Error::InvalidConfig("levels_per_axis must be positive".into()),
            ),
            TargetLayout::Bounded { half_extent } if !(half_extent > 0.0) => {
                Err(Error::InvalidConfig("half_extent must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Points `0..count` of a `levels^dim` lattice in mixed-radix order,
/// centred on the origin.
fn lattice(count: usize, levels: usize, dim: usize, spacing: f64) -> Vec<Vec<f64>> {
    let offset = (levels as f64 - 1.0) / 2.0;
    (0..count)
        .map(|mut i| {
            (0..dim)
                .map(|_| {
                    let digit = i % levels;
                    i /= levels;
                    (digit as f64 - offset) * spacing
                })
                .collect()
        })
        .collect()
}

/// Target embeddings for `count` instances of class `class`.
pub fn class_targets(class: usize, count: usize, config: &OracleConfig) -> Result<Vec<Vec<f64>>> {
    let c = config.embed_dim;
    match config.layout {
        TargetLayout::Separated { levels_per_axis } => {
            let capacity = (levels_per_axis as u128)
                .checked_pow(c as u32)
                .unwrap_or(u128::MAX);
            if count as u128 > capacity {
                return Err(Error::LatticeInfeasible {
                    class,
                    count,
                    capacity: capacity.min(usize::MAX as u128) as usize,
                });
            }
            Ok(lattice(count, levels_per_axis, c, 2.0 * config.d_dst))
        }
        TargetLayout::Bounded { half_extent } => {
            let mut levels = 1usize;
            while (levels as u128).pow(c as u32) < count as u128 {
                levels += 1;
            }
            let spacing = if levels > 1 {
                (2.0 * config.d_dst).min(2.0 * half_extent / (levels - 1) as f64)
            } else {
                0.0
            };
            Ok(lattice(count, levels, c, spacing))
        }
    }
}

/// Target embedding for every instance of a scene, indexed by instance id.
/// Within a class, instances take lattice points in id order.
pub fn scene_targets(scene: &Scene, config: &OracleConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let n = scene.instances.len();
    let mut targets = vec![Vec::new(); n];
    for class in 0..scene.num_classes {
        let members: Vec<usize> = (0..n).filter(|&i| scene.class_of(i) == class).collect();
        for (i, t) in members
            .iter()
            .zip(class_targets(class, members.len(), config)?)
        {
            targets[*i] = t;
        }
    }
    Ok(targets)
}

fn one_hot(labels: &LabelMap, channels: usize, margin: f64) -> FeatureMap {
    let mut f = FeatureMap::zeros(labels.height, labels.width, channels);
    for (p, &l) in labels.data.iter().enumerate() {
        f.pixel_mut(p)[l as usize] = margin;
    }
    f
}

/// Ideal heads for one rendered sample. Noise is drawn from a stream seeded
/// by `config.seed`, so callers pass a per-sample seed.
pub fn oracle_predict(
    scene: &Scene,
    rendered: &RenderedSample,
    config: &OracleConfig,
) -> Result<HeadMaps> {
    let targets = scene_targets(scene, config)?;
    let c = config.embed_dim;
    let sigma = if config.normalize_noise {
        config.sigma / c as f64
    } else {
        config.sigma
    };
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = rng::stream(config.seed);
    let mut embed = |instances: &LabelMap| {
        let mut f = FeatureMap::zeros(instances.height, instances.width, c);
        for (p, &id) in instances.data.iter().enumerate() {
            if id == 0 {
                continue;
            }
            for (v, t) in f.pixel_mut(p).iter_mut().zip(&targets[id as usize - 1]) {
                *v = if sigma > 0.0 {
                    t + noise.sample(&mut rng)
                } else {
                    *t
                };
            }
        }
        f
    };
    let fg_embed = embed(&rendered.fg_instance);
    let occ_embed = embed(&rendered.occ_instance);
    let k = scene.num_classes + 1;
    Ok(HeadMaps {
        fg_logits: one_hot(&rendered.fg_class, k, config.logit_margin),
        occ_logits: one_hot(&rendered.occ_class, k, config.logit_margin),
        fg_embed,
        occ_embed,
    })
}
