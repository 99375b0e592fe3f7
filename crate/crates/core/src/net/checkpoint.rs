//! Checkpoint container.
//!
//! Layout: the 8-byte magic `AMSEGCKP`, a little-endian `u32` format
//! version, a little-endian `u64` byte length of a JSON index, the index
//! itself, then every tensor as raw little-endian `f32` values. The index
//! records the architecture and, per tensor, its name, shape and position
//! (in elements) within the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, Predictor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AMSEGCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
}

fn entries(model: &Predictor<f32>) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, layer) in model.layer_names().into_iter().zip(model.layers()) {
        let k = layer.kernel;
        for (suffix, shape) in [
            ("weight", vec![layer.out_ch, layer.in_ch, k, k]),
            ("bias", vec![layer.out_ch]),
        ] {
            let len = shape.iter().product();
            out.push(TensorEntry {
                name: format!("{name}.{suffix}"),
                shape,
                offset,
                len,
            });
            offset += len;
        }
    }
    out
}

pub fn to_bytes(model: &Predictor<f32>) -> Vec<u8> {
    let index = CheckpointIndex {
        arch: model.arch.clone(),
        tensors: entries(model),
    };
    let json = serde_json::to_vec(&index).expect("index serialises");
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for layer in model.layers() {
        for v in layer.weight.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Predictor<f32>> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let index_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize
        .checked_add(index_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated index".into()))?;
    let index: CheckpointIndex = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| bad(format!("malformed index: {e}")))?;
    let data = &bytes[data_start..];
    if data.len() % 4 != 0 {
        return Err(bad(
            "data section is not a whole number of f32 values".into()
        ));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut model = Predictor::<f32>::zeros(&index.arch)?;
    let expected = entries(&model);
    if expected.len() != index.tensors.len() {
        return Err(bad(format!(
            "index lists {} tensors, architecture has {}",
            index.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = index.tensors.iter();
    for layer in model.layers_mut() {
        for dst in [&mut layer.weight, &mut layer.bias] {
            let entry = tensors.next().unwrap();
            if entry.len != dst.len() || entry.shape.iter().product::<usize>() != entry.len {
                return Err(bad(format!("tensor {} has the wrong shape", entry.name)));
            }
            let src = values
                .get(entry.offset..entry.offset + entry.len)
                .ok_or_else(|| bad(format!("tensor {} runs past the data section", entry.name)))?;
            if src.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!(
                    "tensor {} holds non-finite values",
                    entry.name
                )));
            }
            dst.copy_from_slice(src);
        }
    }
    for (e, x) in index.tensors.iter().zip(&expected) {
        if e.name != x.name || e.shape != x.shape {
            return Err(bad(format!(
                "unexpected tensor {} (wanted {})",
                e.name, x.name
            )));
        }
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Predictor<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Predictor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
