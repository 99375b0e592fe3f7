//! Row-major 2-D grids shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// 8-bit grayscale image.
pub type GrayImage = Grid<u8>;
/// Label map: 0 is background/none, `v > 0` encodes id `v - 1`.
pub type LabelMap = Grid<u16>;
/// Binary mask.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} grid",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        debug_assert!(self.same_shape(other));
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }
}

impl LabelMap {
    /// Mask of pixels carrying id `id` (i.e. value `id + 1`).
    pub fn mask_of(&self, id: usize) -> Mask {
        let v = (id + 1) as u16;
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| x == v).collect(),
        }
    }
}
