//! Minibatch training of the predictor on the layered loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::model::{Gradients, Heads, Predictor};
use super::tensor::Scalar;
use super::{from_feature_map, image_tensor};
use crate::losscore::{loss_gradient, InstanceRegions, LossBreakdown, LossConfig, LossInputs};
use crate::rng;
use crate::scenegen::{generate_range, Sample, SceneConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Samples generated per epoch when streaming.
    pub samples_per_epoch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            epochs: 10,
            samples_per_epoch: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.samples_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, epochs and samples_per_epoch must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return Err(Error::InvalidConfig(
                "invalid moment decay constants".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Where training samples come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainingData<'a> {
    /// Fresh samples every epoch, drawn with a seed derived from the scene
    /// seed and the epoch number.
    Streaming(&'a SceneConfig),
    /// A fixed set, reshuffled every epoch.
    Fixed(&'a [Sample]),
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_var: f64,
    pub l_dst: f64,
    pub l_reg: f64,
    pub l_semantic: f64,
    pub total: f64,
}

/// Loss and parameter gradient of one sample.
pub fn sample_gradient<T: Scalar>(
    model: &Predictor<T>,
    sample: &Sample,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let r = &sample.rendered;
    let (heads, cache) = model.forward(&image_tensor(&r.image))?;
    let maps = heads.to_maps();
    let class_of: Vec<usize> = (0..r.num_instances())
        .map(|n| sample.scene.class_of(n))
        .collect();
    let regions = InstanceRegions::from_label_maps(&r.fg_instance, &r.occ_instance, &class_of)?;
    let inputs = LossInputs {
        fg_embed: &maps.fg_embed,
        occ_embed: &maps.occ_embed,
        fg_logits: &maps.fg_logits,
        occ_logits: &maps.occ_logits,
        regions: &regions,
        fg_class: &r.fg_class,
        occ_class: &r.occ_class,
    };
    let (breakdown, g) = loss_gradient(&inputs, loss)?;
    let d_out = Heads {
        fg_logits: from_feature_map(&g.fg_logits),
        occ_logits: from_feature_map(&g.occ_logits),
        fg_embed: from_feature_map(&g.fg_embed),
        occ_embed: from_feature_map(&g.occ_embed),
    };
    Ok((breakdown, model.backward(&cache, &d_out)))
}

fn first_non_finite(b: &LossBreakdown) -> Option<&'static str> {
    [
        ("l_var", b.l_var),
        ("l_dst", b.l_dst),
        ("l_reg", b.l_reg),
        ("l_semantic", b.l_semantic),
        ("total", b.total),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(name, _)| name)
}

/// Trains `model` in place and returns the per-epoch log. `on_epoch` sees
/// each entry as soon as its epoch finishes.
pub fn train<T: Scalar>(
    model: &mut Predictor<T>,
    data: TrainingData<'_>,
    loss: &LossConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    loss.validate()?;
    let mut adam = Adam::new(model, config.adam());
    let mut log = Vec::with_capacity(config.epochs);
    let mut iteration = 0usize;
    for epoch in 0..config.epochs {
        let streamed;
        let mut order: Vec<&Sample> = match data {
            TrainingData::Streaming(scene) => {
                let epoch_scene = SceneConfig {
                    seed: rng::split(scene.seed, epoch as u64),
                    ..scene.clone()
                };
                streamed = generate_range(&epoch_scene, 0..config.samples_per_epoch)?;
                streamed.iter().collect()
            }
            TrainingData::Fixed(samples) => samples.iter().collect(),
        };
        if order.is_empty() {
            return Err(Error::InvalidConfig("no training samples".into()));
        }
        order.shuffle(&mut rng::stream(rng::split(config.seed, epoch as u64)));

        let mut sums = [0.0f64; 5];
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(LossBreakdown, Gradients<T>)> = batch
                .par_iter()
                .map(|s| sample_gradient(model, s, loss))
                .collect::<Result<_>>()?;
            let mut total = model.zero_gradients();
            for (b, g) in &results {
                if let Some(term) = first_non_finite(b) {
                    return Err(Error::NonFinite { iteration, term });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        iteration,
                        term: "gradient",
                    });
                }
                total.add_assign(g);
                for (s, v) in
                    sums.iter_mut()
                        .zip([b.l_var, b.l_dst, b.l_reg, b.l_semantic, b.total])
                {
                    *s += v;
                }
            }
            total.scale(T::of(1.0 / results.len() as f64));
            adam.step(model, &total);
            iteration += 1;
        }
        let n = order.len() as f64;
        let entry = EpochLog {
            epoch,
            l_var: sums[0] / n,
            l_dst: sums[1] / n,
            l_reg: sums[2] / n,
            l_semantic: sums[3] / n,
            total: sums[4] / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Writes the log as `epoch,l_var,l_dst,l_reg,l_semantic,total` rows.
pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,l_var,l_dst,l_reg,l_semantic,total\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.l_var, e.l_dst, e.l_reg, e.l_semantic, e.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
