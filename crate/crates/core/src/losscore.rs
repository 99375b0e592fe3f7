//! Layered discriminative loss.
//!
//! Pixels of instance `n` live in two embedding maps: the foreground map for
//! pixels where `n` is topmost and the occlusion map where `n` is second from
//! top. The instance mean `mu_n` pools both layers, so the variance term pulls
//! visible and hidden pixels of one instance towards a single point:
//!
//! ```text
//! l_var = 1/N sum_n 1/(|Rf_n|+|Ro_n|) sum_{p in Rf_n u Ro_n} [ |mu_n - E(p)|_1 - d_var ]_+^2
//! l_dst = sum_k 1/(N_k (N_k-1)) sum_{n != m in class k} [ 2 d_dst - |mu_n - mu_m|_1 ]_+^2
//! l_reg = 1/N sum_n |mu_n|_1
//! ```
//!
//! Two auxiliary softmax cross-entropy terms supervise the semantic heads.
//! Gradients are exact subgradients; a hinge whose argument is exactly zero
//! and an L1 coordinate at exactly zero both take the zero branch.
//!
//! All reductions run in `f64` in a fixed order so losses are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::raster::LabelMap;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub d_var: f64,
    pub d_dst: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub semantic_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            d_var: 0.5,
            d_dst: 1.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            semantic_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_var > 0.0 && self.d_dst > self.d_var) {
            return Err(Error::InvalidConfig(
                "loss margins need 0 < d_var < d_dst".into(),
            ));
        }
        if [self.alpha, self.beta, self.gamma, self.semantic_weight]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Dense per-pixel feature field, pixel-major (`data[p * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Per-pixel C-dimensional embedding field of one layer.
pub type EmbeddingMap = FeatureMap;

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    /// Per-pixel argmax, ties to the lowest channel.
    pub fn argmax(&self) -> LabelMap {
        let data = (0..self.num_pixels())
            .map(|p| {
                let v = self.pixel(p);
                let mut best = 0;
                for c in 1..v.len() {
                    if v[c] > v[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Pixels of one ground-truth instance in each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRegion {
    pub instance_id: usize,
    pub class_id: usize,
    pub fg: Vec<usize>,
    pub occ: Vec<usize>,
}

impl InstanceRegion {
    pub fn len(&self) -> usize {
        self.fg.len() + self.occ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceRegions {
    pub instances: Vec<InstanceRegion>,
}

impl InstanceRegions {
    /// Regions from layered instance label maps. Instances absent from both
    /// layers are left out; `class_of[id]` gives each instance's class.
    pub fn from_label_maps(
        fg_instance: &LabelMap,
        occ_instance: &LabelMap,
        class_of: &[usize],
    ) -> Result<Self> {
        if !fg_instance.same_shape(occ_instance) {
            return Err(Error::ShapeMismatch(
                "fg/occ instance maps differ in size".into(),
            ));
        }
        let mut fg = vec![Vec::new(); class_of.len()];
        let mut occ = vec![Vec::new(); class_of.len()];
        for (layer, map) in [(&mut fg, fg_instance), (&mut occ, occ_instance)] {
            for (p, &v) in map.data.iter().enumerate() {
                if v == 0 {
                    continue;
                }
                let id = v as usize - 1;
                if id >= class_of.len() {
                    return Err(Error::ShapeMismatch(format!("label {v} has no class")));
                }
                layer[id].push(p);
            }
        }
        let instances = fg
            .into_iter()
            .zip(occ)
            .enumerate()
            .filter(|(_, (f, o))| !f.is_empty() || !o.is_empty())
            .map(|(id, (fg, occ))| InstanceRegion {
                instance_id: id,
                class_id: class_of[id],
                fg,
                occ,
            })
            .collect();
        Ok(Self { instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.instances.iter().map(|r| r.class_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_var: f64,
    pub l_dst: f64,
    pub l_reg: f64,
    pub l_semantic: f64,
    pub total: f64,
    #[serde(skip)]
    pub means: Vec<Vec<f64>>,
}

/// Everything the loss reads for one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub fg_embed: &'a EmbeddingMap,
    pub occ_embed: &'a EmbeddingMap,
    pub fg_logits: &'a FeatureMap,
    pub occ_logits: &'a FeatureMap,
    pub regions: &'a InstanceRegions,
    pub fg_class: &'a LabelMap,
    pub occ_class: &'a LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub fg_embed: EmbeddingMap,
    pub occ_embed: EmbeddingMap,
    pub fg_logits: FeatureMap,
    pub occ_logits: FeatureMap,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_regions(fg: &EmbeddingMap, occ: &EmbeddingMap, regions: &InstanceRegions) -> Result<()> {
    if !fg.same_shape(occ) {
        return Err(Error::ShapeMismatch(
            "fg/occ embeddings differ in shape".into(),
        ));
    }
    let n = fg.num_pixels();
    for r in &regions.instances {
        if r.fg.iter().chain(&r.occ).any(|&p| p >= n) {
            return Err(Error::ShapeMismatch(format!(
                "instance {} has pixels outside the map",
                r.instance_id
            )));
        }
    }
    Ok(())
}

/// Mean embedding of each instance over its pixels in both layers.
pub fn instance_means(
    fg: &EmbeddingMap,
    occ: &EmbeddingMap,
    regions: &InstanceRegions,
) -> Result<Vec<Vec<f64>>> {
    check_regions(fg, occ, regions)?;
    let c = fg.channels;
    regions
        .instances
        .iter()
        .map(|r| {
            if r.is_empty() {
                return Err(Error::EmptyInstance {
                    instance: r.instance_id,
                });
            }
            let mut mu = vec![0.0; c];
            for (map, pixels) in [(fg, &r.fg), (occ, &r.occ)] {
                for &p in pixels {
                    for (m, e) in mu.iter_mut().zip(map.pixel(p)) {
                        *m += e;
                    }
                }
            }
            let inv = 1.0 / r.len() as f64;
            mu.iter_mut().for_each(|m| *m *= inv);
            Ok(mu)
        })
        .collect()
}

pub fn variance_loss(
    fg: &EmbeddingMap,
    occ: &EmbeddingMap,
    regions: &InstanceRegions,
    means: &[Vec<f64>],
    config: &LossConfig,
) -> f64 {
    if regions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (r, mu) in regions.instances.iter().zip(means) {
        let mut acc = 0.0;
        for (map, pixels) in [(fg, &r.fg), (occ, &r.occ)] {
            for &p in pixels {
                let h = (l1(mu, map.pixel(p)) - config.d_var).max(0.0);
                acc += h * h;
            }
        }
        total += acc / r.len() as f64;
    }
    total / regions.len() as f64
}

/// Within-class pairwise push term; cross-class pairs are never penalised.
pub fn distance_loss(means: &[Vec<f64>], classes: &[usize], config: &LossConfig) -> f64 {
    let mut total = 0.0;
    for (_, members) in group_by_class(classes) {
        let nk = members.len();
        if nk < 2 {
            continue;
        }
        let mut acc = 0.0;
        for &n in &members {
            for &m in &members {
                if n != m {
                    let h = (2.0 * config.d_dst - l1(&means[n], &means[m])).max(0.0);
                    acc += h * h;
                }
            }
        }
        total += acc / (nk * (nk - 1)) as f64;
    }
    total
}

pub fn regularization_loss(means: &[Vec<f64>]) -> f64 {
    if means.is_empty() {
        return 0.0;
    }
    means
        .iter()
        .map(|m| m.iter().map(|x| x.abs()).sum::<f64>())
        .sum::<f64>()
        / means.len() as f64
}

/// Mean per-pixel softmax cross-entropy against integer labels.
pub fn softmax_cross_entropy(logits: &FeatureMap, labels: &LabelMap) -> f64 {
    let n = logits.num_pixels();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for p in 0..n {
        let z = logits.pixel(p);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[labels.data[p] as usize];
    }
    total / n as f64
}

/// Class ids in first-seen order with their member indices.
fn group_by_class(classes: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &k) in classes.iter().enumerate() {
        match groups.iter_mut().find(|(c, _)| *c == k) {
            Some((_, g)) => g.push(i),
            None => groups.push((k, vec![i])),
        }
    }
    groups.sort_by_key(|(k, _)| *k);
    groups
}

fn check_inputs(inputs: &LossInputs<'_>) -> Result<()> {
    check_regions(inputs.fg_embed, inputs.occ_embed, inputs.regions)?;
    let n = inputs.fg_embed.num_pixels();
    for (logits, labels) in [
        (inputs.fg_logits, inputs.fg_class),
        (inputs.occ_logits, inputs.occ_class),
    ] {
        if logits.num_pixels() != n || labels.len() != n {
            return Err(Error::ShapeMismatch(
                "logits/labels do not match the embedding resolution".into(),
            ));
        }
        if labels.data.iter().any(|&l| l as usize >= logits.channels) {
            return Err(Error::ShapeMismatch(
                "semantic label exceeds logit channels".into(),
            ));
        }
    }
    Ok(())
}

/// Signs of every expression at which the embedding loss is not
/// differentiable: each hinge argument and each difference under an
/// absolute value. Analytic gradients are exact wherever this pattern is
/// locally constant, which is what gradient checks test for.
pub fn kink_signature(
    fg: &EmbeddingMap,
    occ: &EmbeddingMap,
    regions: &InstanceRegions,
    config: &LossConfig,
) -> Result<Vec<i8>> {
    let means = instance_means(fg, occ, regions)?;
    let s = |x: f64| x.partial_cmp(&0.0).map_or(0, |o| o as i8);
    let mut sig = Vec::new();
    for (r, mu) in regions.instances.iter().zip(&means) {
        for (map, px) in [(fg, &r.fg), (occ, &r.occ)] {
            for &q in px {
                let e = map.pixel(q);
                let d: f64 = mu.iter().zip(e).map(|(a, b)| (a - b).abs()).sum();
                sig.push(s(d - config.d_var));
                sig.extend(mu.iter().zip(e).map(|(a, b)| s(a - b)));
            }
        }
        sig.extend(mu.iter().map(|&m| s(m)));
    }
    for (i, a) in means.iter().enumerate() {
        for (j, b) in means.iter().enumerate() {
            if i != j {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                sig.push(s(2.0 * config.d_dst - d));
                sig.extend(a.iter().zip(b).map(|(x, y)| s(x - y)));
            }
        }
    }
    Ok(sig)
}

pub fn total_loss(inputs: &LossInputs<'_>, config: &LossConfig) -> Result<LossBreakdown> {
    check_inputs(inputs)?;
    let means = instance_means(inputs.fg_embed, inputs.occ_embed, inputs.regions)?;
    let l_var = variance_loss(
        inputs.fg_embed,
        inputs.occ_embed,
        inputs.regions,
        &means,
        config,
    );
    let l_dst = distance_loss(&means, &inputs.regions.classes(), config);
    let l_reg = regularization_loss(&means);
    let l_semantic = softmax_cross_entropy(inputs.fg_logits, inputs.fg_class)
        + softmax_cross_entropy(inputs.occ_logits, inputs.occ_class);
    let total = config.alpha * l_var
        + config.beta * l_dst
        + config.gamma * l_reg
        + config.semantic_weight * l_semantic;
    Ok(LossBreakdown {
        l_var,
        l_dst,
        l_reg,
        l_semantic,
        total,
        means,
    })
}

/// Loss breakdown plus exact (sub)gradients of `total` with respect to
/// both embedding maps and both logit maps.
pub fn loss_gradient(
    inputs: &LossInputs<'_>,
    config: &LossConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    let breakdown = total_loss(inputs, config)?;
    let fg = inputs.fg_embed;
    let occ = inputs.occ_embed;
    let regions = inputs.regions;
    let c = fg.channels;
    let n_inst = regions.len();

    let mut g_fg = FeatureMap::zeros(fg.height, fg.width, c);
    let mut g_occ = FeatureMap::zeros(fg.height, fg.width, c);
    // Gradient w.r.t. each mean; distributed to pixels at the end.
    let mut g_mu = vec![vec![0.0; c]; n_inst];
    let means = &breakdown.means;

    if n_inst > 0 {
        let inv_n = 1.0 / n_inst as f64;
        for (i, r) in regions.instances.iter().enumerate() {
            let mu = &means[i];
            let scale = config.alpha * inv_n / r.len() as f64;
            for (map, grad, pixels) in [(fg, &mut g_fg, &r.fg), (occ, &mut g_occ, &r.occ)] {
                for &p in pixels {
                    let e = map.pixel(p);
                    let h = l1(mu, e) - config.d_var;
                    if h <= 0.0 {
                        continue;
                    }
                    let coeff = 2.0 * h * scale;
                    let gp = grad.pixel_mut(p);
                    for ch in 0..c {
                        let s = sign(mu[ch] - e[ch]);
                        gp[ch] -= coeff * s;
                        g_mu[i][ch] += coeff * s;
                    }
                }
            }
            for ch in 0..c {
                g_mu[i][ch] += config.gamma * inv_n * sign(mu[ch]);
            }
        }

        for (_, members) in group_by_class(&regions.classes()) {
            let nk = members.len();
            if nk < 2 {
                continue;
            }
            let scale = config.beta / (nk * (nk - 1)) as f64;
            for &n in &members {
                for &m in &members {
                    if n == m {
                        continue;
                    }
                    let h = 2.0 * config.d_dst - l1(&means[n], &means[m]);
                    if h <= 0.0 {
                        continue;
                    }
                    let coeff = 2.0 * h * scale;
                    for ch in 0..c {
                        let s = sign(means[n][ch] - means[m][ch]);
                        g_mu[n][ch] -= coeff * s;
                        g_mu[m][ch] += coeff * s;
                    }
                }
            }
        }

        for (i, r) in regions.instances.iter().enumerate() {
            let inv = 1.0 / r.len() as f64;
            for (grad, pixels) in [(&mut g_fg, &r.fg), (&mut g_occ, &r.occ)] {
                for &p in pixels {
                    for (g, gm) in grad.pixel_mut(p).iter_mut().zip(&g_mu[i]) {
                        *g += gm * inv;
                    }
                }
            }
        }
    }

    let g_fg_logits =
        cross_entropy_gradient(inputs.fg_logits, inputs.fg_class, config.semantic_weight);
    let g_occ_logits =
        cross_entropy_gradient(inputs.occ_logits, inputs.occ_class, config.semantic_weight);
    Ok((
        breakdown,
        LossGradients {
            fg_embed: g_fg,
            occ_embed: g_occ,
            fg_logits: g_fg_logits,
            occ_logits: g_occ_logits,
        },
    ))
}

fn cross_entropy_gradient(logits: &FeatureMap, labels: &LabelMap, weight: f64) -> FeatureMap {
    let mut g = FeatureMap::zeros(logits.height, logits.width, logits.channels);
    let n = logits.num_pixels();
    if n == 0 {
        return g;
    }
    let scale = weight / n as f64;
    for p in 0..n {
        let z = logits.pixel(p);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let gp = g.pixel_mut(p);
        for (k, v) in z.iter().enumerate() {
            gp[k] = scale * (v - m).exp() / denom;
        }
        gp[labels.data[p] as usize] -= scale;
    }
    g
}

#[cfg(test)]
mod tests;
