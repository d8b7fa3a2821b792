use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Config(format!(
                "mask data has {} entries, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        BinaryMask { height, width, data }
    }

    /// Pixels strictly above `threshold`.
    pub fn from_threshold(values: &[f64], height: usize, width: usize, threshold: f64) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_or_false(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.height
            && (c as usize) < self.width
            && self.data[r as usize * self.width + c as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// `[h, w]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.to_values()).expect("mask has positive extents")
    }

    /// Nearest-neighbor resampling with half-pixel centers.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let pick = |dst: usize, src: usize, out: usize| ((dst * 2 + 1) * src / (2 * out)).min(src - 1);
        BinaryMask::from_fn(height, width, |r, c| {
            self.get(pick(r, self.height, height), pick(c, self.width, width))
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Rotation by 90° counter-clockwise.
    pub fn rot90(&self) -> Self {
        BinaryMask::from_fn(self.width, self.height, |r, c| self.get(c, self.width - 1 - r))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }
}
