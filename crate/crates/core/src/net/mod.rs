//! Convolutional predictor producing the four output heads, its training
//! loop, checkpoints, and a ground-truth oracle standing in for a trained
//! network.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;

use crate::losscore::FeatureMap;
use crate::raster::{GrayImage, LabelMap};

pub use model::{ArchConfig, Gradients, Heads, Predictor};
pub use oracle::{oracle_predict, OracleConfig, TargetLayout};
pub use tensor::{Scalar, Tensor};
pub use train::{train, EpochLog, TrainConfig, TrainingData};

/// The four heads at label resolution, pixel-major, in 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub fg_logits: FeatureMap,
    pub occ_logits: FeatureMap,
    pub fg_embed: FeatureMap,
    pub occ_embed: FeatureMap,
}

impl HeadMaps {
    /// Per-pixel argmax of the two semantic heads.
    pub fn semantic_labels(&self) -> (LabelMap, LabelMap) {
        (self.fg_logits.argmax(), self.occ_logits.argmax())
    }
}

/// Network input: dark outlines map to 1, background to 0.
pub fn image_tensor<T: Scalar>(image: &GrayImage) -> Tensor<T> {
    Tensor {
        c: 1,
        h: image.height,
        w: image.width,
        data: image
            .data
            .iter()
            .map(|&v| T::of(1.0 - v as f64 / 255.0))
            .collect(),
    }
}

/// CHW tensor to a pixel-major feature map.
pub fn to_feature_map<T: Scalar>(t: &Tensor<T>) -> FeatureMap {
    let n = t.plane();
    let mut f = FeatureMap::zeros(t.h, t.w, t.c);
    for c in 0..t.c {
        for p in 0..n {
            f.data[p * t.c + c] = t.data[c * n + p].as_f64();
        }
    }
    f
}

/// Pixel-major feature map to a CHW tensor.
pub fn from_feature_map<T: Scalar>(f: &FeatureMap) -> Tensor<T> {
    let n = f.num_pixels();
    let mut t = Tensor::zeros(f.channels, f.height, f.width);
    for p in 0..n {
        for c in 0..f.channels {
            t.data[c * n + p] = T::of(f.data[p * f.channels + c]);
        }
    }
    t
}
