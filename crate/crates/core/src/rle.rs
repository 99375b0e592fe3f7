//! Run-length encoding of binary masks.
//!
//! Masks are scanned row-major; `counts` alternates run lengths of `false`
//! and `true` pixels, always starting with a (possibly zero) `false` run.

use crate::raster::Mask;
use crate::{Error, Result};

pub fn encode(mask: &Mask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &mask.data {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn decode(counts: &[u32], width: usize, height: usize) -> Result<Mask> {
    let mut data = Vec::with_capacity(width * height);
    let mut value = false;
    for &c in counts {
        data.extend(std::iter::repeat(value).take(c as usize));
        value = !value;
    }
    if data.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "RLE covers {} pixels, expected {}x{}",
            data.len(),
            width,
            height
        )));
    }
    Mask::from_vec(width, height, data)
}
