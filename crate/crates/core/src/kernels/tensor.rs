use serde::{Deserialize, Serialize};

use super::KernelError;

/// Dense `C x H x W` feature map, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(KernelError::Shape(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(KernelError::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite("feature map"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(c, y, x)]
    }

    /// Same shape, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, KernelError> {
        FeatureMap::new(self.channels, self.height, self.width, data)
    }

    pub(crate) fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Single-channel `H x W` map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(KernelError::Shape(format!(
                "score map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(ScoreMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// `C x S x S` pooled feature, used both for ROI features and `T^cls`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeature {
    channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl PooledFeature {
    pub fn new(channels: usize, size: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if channels == 0 || size == 0 || data.len() != channels * size * size {
            return Err(KernelError::Shape(format!(
                "pooled feature {channels}x{size}x{size} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite("pooled feature"));
        }
        Ok(PooledFeature { channels, size, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.size + i) * self.size + j]
    }
}
