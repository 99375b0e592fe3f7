//! Strided convolutional trunk with four 1x1 projection heads.
//!
//! The trunk is a stack of blocks, each opening with a stride-2 3x3
//! convolution. The block that lands on label resolution is concatenated
//! with every deeper block (upsampled back to label resolution), fused by
//! one more convolution, and shared by the four heads.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{upsample, upsample_backward, Conv2d, ConvCache, Scalar, Tensor};
use super::{image_tensor, to_feature_map, HeadMaps};
use crate::raster::GrayImage;
use crate::rng;
use crate::{Error, Result};

/// Head order used everywhere: semantic heads, then embedding heads.
pub const HEAD_NAMES: [&str; 4] = ["fg_semantic", "occ_semantic", "fg_embed", "occ_embed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub canvas_size: usize,
    pub label_size: usize,
    /// Shape classes K; semantic heads emit K + 1 channels.
    pub num_classes: usize,
    /// Embedding dimension C.
    pub embed_dim: usize,
    pub block_widths: Vec<usize>,
    pub convs_per_block: usize,
    pub fuse_width: usize,
    pub fuse_kernel: usize,
    /// Hidden widths of every head before its output layer.
    pub head_widths: Vec<usize>,
    /// Append normalised x/y coordinate planes to the input image.
    pub coord_channels: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            canvas_size: 256,
            label_size: 64,
            num_classes: 3,
            embed_dim: 6,
            block_widths: vec![16, 32, 64, 128],
            convs_per_block: 2,
            fuse_width: 64,
            fuse_kernel: 3,
            head_widths: vec![32, 32, 16],
            coord_channels: false,
        }
    }
}

impl ArchConfig {
    /// Stride-2 blocks between canvas and label resolution.
    pub fn downsamples(&self) -> usize {
        (self.canvas_size / self.label_size.max(1)).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.label_size == 0 || self.canvas_size == 0 {
            return bad("canvas and label sizes must be positive");
        }
        let d = self.downsamples();
        if self.label_size << d != self.canvas_size || d == 0 {
            return bad("canvas_size must be label_size times a power of two above one");
        }
        if self.block_widths.len() < d {
            return bad("trunk needs at least one block per halving to label resolution");
        }
        if self.canvas_size % (1 << self.block_widths.len()) != 0 {
            return bad("canvas_size must be divisible by 2^blocks");
        }
        if self.block_widths.contains(&0) || self.head_widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.num_classes == 0 || self.embed_dim == 0 || self.fuse_width == 0 {
            return bad("num_classes, embed_dim and fuse_width must be positive");
        }
        if self.convs_per_block == 0 || self.fuse_kernel % 2 == 0 {
            return bad("convs_per_block must be positive and fuse_kernel odd");
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        if self.coord_channels {
            3
        } else {
            1
        }
    }

    fn head_outputs(&self) -> [usize; 4] {
        let k = self.num_classes + 1;
        [k, k, self.embed_dim, self.embed_dim]
    }

    /// Index of the first block at label resolution.
    fn label_block(&self) -> usize {
        self.downsamples() - 1
    }

    fn concat_widths(&self) -> &[usize] {
        &self.block_widths[self.label_block()..]
    }
}

/// Head outputs, CHW, at label resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads<T> {
    pub fg_logits: Tensor<T>,
    pub occ_logits: Tensor<T>,
    pub fg_embed: Tensor<T>,
    pub occ_embed: Tensor<T>,
}

impl<T: Scalar> Heads<T> {
    fn from_vec(mut v: Vec<Tensor<T>>) -> Self {
        let occ_embed = v.pop().unwrap();
        let fg_embed = v.pop().unwrap();
        let occ_logits = v.pop().unwrap();
        let fg_logits = v.pop().unwrap();
        Self {
            fg_logits,
            occ_logits,
            fg_embed,
            occ_embed,
        }
    }

    fn as_array(&self) -> [&Tensor<T>; 4] {
        [
            &self.fg_logits,
            &self.occ_logits,
            &self.fg_embed,
            &self.occ_embed,
        ]
    }

    pub fn to_maps(&self) -> HeadMaps {
        HeadMaps {
            fg_logits: to_feature_map(&self.fg_logits),
            occ_logits: to_feature_map(&self.occ_logits),
            fg_embed: to_feature_map(&self.fg_embed),
            occ_embed: to_feature_map(&self.occ_embed),
        }
    }
}

/// Activations kept from [`Predictor::forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    trunk: Vec<Vec<ConvCache<T>>>,
    fuse: ConvCache<T>,
    heads: Vec<Vec<ConvCache<T>>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Which ReLU outputs are positive, over every layer. Backpropagated
    /// gradients are exact wherever this pattern is locally constant.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.trunk
            .iter()
            .flatten()
            .chain(std::iter::once(&self.fuse))
            .chain(self.heads.iter().flatten())
            .flat_map(|c| c.positive())
            .collect()
    }
}

/// Per-layer `(d weight, d bias)` in [`Predictor::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, x)| *a = *a + *x);
            b.iter_mut().zip(ob).for_each(|(a, x)| *a = *a + *x);
        }
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|a| *a = *a * s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor<T> {
    pub arch: ArchConfig,
    pub trunk: Vec<Vec<Conv2d<T>>>,
    pub fuse: Conv2d<T>,
    pub heads: Vec<Vec<Conv2d<T>>>,
}

impl<T: Scalar> Predictor<T> {
    /// All-zero parameters.
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Vec::new();
        let mut prev = arch.input_channels();
        for &w in &arch.block_widths {
            let block = (0..arch.convs_per_block)
                .map(|i| {
                    let (inp, stride) = if i == 0 { (prev, 2) } else { (w, 1) };
                    Conv2d::zeros(inp, w, 3, stride, true)
                })
                .collect();
            trunk.push(block);
            prev = w;
        }
        let concat: usize = arch.concat_widths().iter().sum();
        let fuse = Conv2d::zeros(concat, arch.fuse_width, arch.fuse_kernel, 1, true);
        let heads = arch
            .head_outputs()
            .iter()
            .map(|&out| {
                let mut layers = Vec::new();
                let mut prev = arch.fuse_width;
                for &w in &arch.head_widths {
                    layers.push(Conv2d::zeros(prev, w, 1, 1, true));
                    prev = w;
                }
                layers.push(Conv2d::zeros(prev, out, 1, 1, false));
                layers
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            trunk,
            fuse,
            heads,
        })
    }

    /// He-normal weights (unit-gain for the linear output layers), zero
    /// biases.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = rng::stream(seed);
        for layer in model.layers_mut() {
            let gain = if layer.relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / layer.fan_in() as f64).sqrt())
                .expect("finite standard deviation");
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = T::of(normal.sample(&mut rng)));
        }
        Ok(model)
    }

    /// Layers in a fixed order: trunk blocks, fuse, then heads.
    pub fn layers(&self) -> Vec<&Conv2d<T>> {
        let mut v: Vec<&Conv2d<T>> = self.trunk.iter().flatten().collect();
        v.push(&self.fuse);
        v.extend(self.heads.iter().flatten());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v: Vec<&mut Conv2d<T>> = self.trunk.iter_mut().flatten().collect();
        v.push(&mut self.fuse);
        v.extend(self.heads.iter_mut().flatten());
        v
    }

    /// Stable layer names matching [`Predictor::layers`].
    pub fn layer_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (b, block) in self.trunk.iter().enumerate() {
            v.extend((0..block.len()).map(|i| format!("trunk.{b}.{i}")));
        }
        v.push("fuse".into());
        for (h, head) in self.heads.iter().enumerate() {
            v.extend((0..head.len()).map(|i| format!("head.{}.{i}", HEAD_NAMES[h])));
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers()
                .iter()
                .map(|l| {
                    (
                        vec![T::zero(); l.weight.len()],
                        vec![T::zero(); l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Predictor<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            kernel: c.kernel,
            stride: c.stride,
            relu: c.relu,
            weight: c.weight.iter().map(|w| U::of(w.as_f64())).collect(),
            bias: c.bias.iter().map(|w| U::of(w.as_f64())).collect(),
        };
        Predictor {
            arch: self.arch.clone(),
            trunk: self
                .trunk
                .iter()
                .map(|b| b.iter().map(conv).collect())
                .collect(),
            fuse: conv(&self.fuse),
            heads: self
                .heads
                .iter()
                .map(|h| h.iter().map(conv).collect())
                .collect(),
        }
    }

    fn with_coords(&self, x: &Tensor<T>) -> Tensor<T> {
        if !self.arch.coord_channels {
            return x.clone();
        }
        let mut coords = Tensor::zeros(2, x.h, x.w);
        let n = x.plane();
        for y in 0..x.h {
            for xx in 0..x.w {
                let p = y * x.w + xx;
                coords.data[p] = T::of(2.0 * (xx as f64 + 0.5) / x.w as f64 - 1.0);
                coords.data[n + p] = T::of(2.0 * (y as f64 + 0.5) / x.h as f64 - 1.0);
            }
        }
        Tensor::concat(&[x, &coords])
    }

    /// Runs the network on a one-channel canvas-sized input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Heads<T>, ForwardCache<T>)> {
        let s = self.arch.canvas_size;
        if (x.c, x.h, x.w) != (1, s, s) {
            return Err(Error::ShapeMismatch(format!(
                "input is {}x{}x{}, predictor expects 1x{s}x{s}",
                x.c, x.h, x.w
            )));
        }
        let mut cur = self.with_coords(x);
        let mut trunk_cache = Vec::with_capacity(self.trunk.len());
        let mut block_out = Vec::with_capacity(self.trunk.len());
        for block in &self.trunk {
            let mut caches = Vec::with_capacity(block.len());
            for conv in block {
                let (out, cache) = conv.forward(&cur);
                caches.push(cache);
                cur = out;
            }
            trunk_cache.push(caches);
            block_out.push(cur.clone());
        }
        let first = self.arch.label_block();
        let ups: Vec<Tensor<T>> = block_out[first..]
            .iter()
            .enumerate()
            .map(|(i, t)| upsample(t, 1 << i))
            .collect();
        let concat = Tensor::concat(&ups.iter().collect::<Vec<_>>());
        let (shared, fuse_cache) = self.fuse.forward(&concat);
        let mut outs = Vec::with_capacity(4);
        let mut head_cache = Vec::with_capacity(4);
        for head in &self.heads {
            let mut t = shared.clone();
            let mut caches = Vec::with_capacity(head.len());
            for conv in head {
                let (out, cache) = conv.forward(&t);
                caches.push(cache);
                t = out;
            }
            outs.push(t);
            head_cache.push(caches);
        }
        Ok((
            Heads::from_vec(outs),
            ForwardCache {
                trunk: trunk_cache,
                fuse: fuse_cache,
                heads: head_cache,
            },
        ))
    }

    /// Backpropagates output gradients to parameter gradients.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &Heads<T>) -> Gradients<T> {
        let mut head_grads = Vec::with_capacity(4);
        let mut d_shared: Option<Tensor<T>> = None;
        for ((head, caches), dy) in self.heads.iter().zip(&cache.heads).zip(d_out.as_array()) {
            let mut g = dy.clone();
            let mut grads = Vec::with_capacity(head.len());
            for (conv, c) in head.iter().zip(caches).rev() {
                let (dx, dw, db) = conv.backward(c, &g);
                grads.push((dw, db));
                g = dx;
            }
            grads.reverse();
            head_grads.push(grads);
            match &mut d_shared {
                Some(acc) => acc.add_assign(&g),
                None => d_shared = Some(g),
            }
        }
        let (d_concat, fuse_dw, fuse_db) = self.fuse.backward(&cache.fuse, &d_shared.unwrap());

        let first = self.arch.label_block();
        let mut d_block: Vec<Option<Tensor<T>>> = vec![None; self.trunk.len()];
        for (i, part) in d_concat.split(self.arch.concat_widths()).iter().enumerate() {
            d_block[first + i] = Some(upsample_backward(part, 1 << i));
        }
        let mut trunk_grads = vec![Vec::new(); self.trunk.len()];
        for b in (0..self.trunk.len()).rev() {
            let Some(mut g) = d_block[b].take() else {
                continue;
            };
            let mut grads = Vec::with_capacity(self.trunk[b].len());
            for (conv, c) in self.trunk[b].iter().zip(&cache.trunk[b]).rev() {
                let (dx, dw, db) = conv.backward(c, &g);
                grads.push((dw, db));
                g = dx;
            }
            grads.reverse();
            trunk_grads[b] = grads;
            if b > 0 {
                match &mut d_block[b - 1] {
                    Some(acc) => acc.add_assign(&g),
                    None => d_block[b - 1] = Some(g),
                }
            }
        }
        let mut layers: Vec<(Vec<T>, Vec<T>)> = trunk_grads.into_iter().flatten().collect();
        layers.push((fuse_dw, fuse_db));
        layers.extend(head_grads.into_iter().flatten());
        Gradients { layers }
    }

    /// Forward pass on an image, returning 64-bit pixel-major head maps.
    pub fn predict(&self, image: &GrayImage) -> Result<HeadMaps> {
        let (heads, _) = self.forward(&image_tensor(image))?;
        Ok(heads.to_maps())
    }
}
