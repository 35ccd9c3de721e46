//! Dense channel-first grids: feature maps `[C, H, W]` and scalar maps `[H, W]`.

use crate::error::{Error, Result};
use crate::tensor_io::TensorContainer;

/// Channel-first dense map. Scalar maps (depth, confidence, transmittance)
/// are stored with `channels == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::domain(format!(
                "map data has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        let i = self.index(c, row, col);
        self.data[i] = value;
    }

    /// Feature vector at a cell, gathered across channels.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, row, col)).collect()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    /// `[C, H, W]` tensor, or `[H, W]` when `scalar` is set and there is one channel.
    pub fn to_tensor(&self, scalar: bool) -> Result<TensorContainer> {
        let shape = if scalar && self.channels == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.channels, self.height, self.width]
        };
        TensorContainer::from_f64(shape, self.data.clone())
    }

    /// Accepts `[H, W]` (one channel) or `[C, H, W]`.
    pub fn from_tensor(t: &TensorContainer) -> Result<Self> {
        let data = t.to_f64_vec();
        match *t.shape() {
            [h, w] => Self::from_vec(1, h, w, data),
            [c, h, w] => Self::from_vec(c, h, w, data),
            ref other => Err(Error::domain(format!(
                "expected a [H,W] or [C,H,W] tensor, got shape {other:?}"
            ))),
        }
    }
}
