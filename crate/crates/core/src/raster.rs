//! Raster containers shared by every stage of the pipeline.
//!
//! Tiles are stored channel-planar (`c * H * W + y * W + x`), which is the
//! layout the convolution kernels consume directly.

use crate::error::{Result, VqadError};

/// An `H x W x C` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTile {
    /// Builds a tile from planar data, rejecting non-finite or out-of-range values.
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(VqadError::Shape(format!(
                "tile dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(VqadError::Shape(format!(
                "expected {} values for a {height}x{width}x{channels} tile, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VqadError::Data(format!("tile value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a tile from interleaved (`HWC`) data.
    pub fn from_interleaved(height: usize, width: usize, channels: usize, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != height * width * channels {
            return Err(VqadError::Shape(format!(
                "expected {} interleaved values, got {}",
                height * width * channels,
                hwc.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; hwc.len()];
        for p in 0..plane {
            for c in 0..channels {
                data[c * plane + p] = hwc[p * channels + c];
            }
        }
        Self::from_planar(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::from_planar(height, width, channels, vec![value; height * width * channels])
    }

    /// Clamps arbitrary values into the unit interval; NaN maps to 0.
    pub(crate) fn from_planar_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Mean over channels at one pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f32 {
        (0..self.channels).map(|c| self.get(y, x, c)).sum::<f32>() / self.channels as f32
    }

    pub fn to_interleaved(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        out
    }

    pub fn same_shape(&self, other: &ImageTile) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// A single-channel real-valued map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(VqadError::Shape(format!(
                "expected {} values for a {height}x{width} map, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn same_shape(&self, other: &GrayMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A boolean raster (foreground = `true`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(VqadError::Shape(format!(
                "expected {} values for a {height}x{width} mask, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// `true` when every foreground pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}
