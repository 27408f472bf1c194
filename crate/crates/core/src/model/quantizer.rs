//! Nearest-neighbour vector quantization against a learned codebook.

use crate::error::{Result, VqadError};
use crate::model::layers::Real;

/// `M` code vectors of length `D`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    size: usize,
    dim: usize,
    vectors: Vec<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(size: usize, dim: usize, vectors: Vec<T>) -> Result<Self> {
        if size == 0 || dim == 0 || vectors.len() != size * dim {
            return Err(VqadError::Shape(format!(
                "codebook of {size}x{dim} needs {} values, got {}",
                size * dim,
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(VqadError::Data("codebook entries must be finite".into()));
        }
        Ok(Self { size, dim, vectors })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, m: usize) -> &[T] {
        &self.vectors[m * self.dim..(m + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.vectors
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.vectors
    }
}

/// Continuous encoder output on the latent grid, stored `[D, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField<T> {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> LatentField<T> {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(VqadError::Shape(format!(
                "latent field {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    /// Builds a field from per-cell vectors given in raster order.
    pub fn from_cells(height: usize, width: usize, dim: usize, cells: &[Vec<T>]) -> Result<Self> {
        if cells.len() != height * width || cells.iter().any(|c| c.len() != dim) {
            return Err(VqadError::Shape("cell list does not match field shape".into()));
        }
        let plane = height * width;
        let mut data = vec![T::zero(); plane * dim];
        for (p, cell) in cells.iter().enumerate() {
            for (d, &v) in cell.iter().enumerate() {
                data[d * plane + p] = v;
            }
        }
        Self::new(height, width, dim, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The `D`-vector at latent cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> Vec<T> {
        let plane = self.height * self.width;
        let p = i * self.width + j;
        (0..self.dim).map(|d| self.data[d * plane + p]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Discretization of a latent field.
///
/// Indices are zero-based codebook rows, laid out in raster order over the
/// `h x w` latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantization<T> {
    pub indices: Vec<usize>,
    pub quantized: LatentField<T>,
    pub residuals: Vec<T>,
}

impl<T: Real> Quantization<T> {
    pub fn height(&self) -> usize {
        self.quantized.height()
    }

    pub fn width(&self) -> usize {
        self.quantized.width()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        self.indices[i * self.width() + j]
    }

    pub fn residual(&self, i: usize, j: usize) -> T {
        self.residuals[i * self.width() + j]
    }
}

/// Squared Euclidean distance in f64, accumulated in coordinate order. For
/// f32 inputs every difference and square is exact.
#[inline]
fn squared_distance<T: Real>(a: impl Iterator<Item = T>, b: &[T]) -> f64 {
    a.zip(b).fold(0.0, |acc, (x, &y)| {
        let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
        acc + d * d
    })
}

/// Snaps every latent cell to its nearest code vector. Ties resolve to the
/// smallest index.
pub fn quantize<T: Real>(field: &LatentField<T>, codebook: &Codebook<T>) -> Result<Quantization<T>> {
    if field.dim() != codebook.dim() {
        return Err(VqadError::Shape(format!(
            "latent dimension {} does not match codebook dimension {}",
            field.dim(),
            codebook.dim()
        )));
    }
    let plane = field.height * field.width;
    let dim = field.dim;
    let mut indices = Vec::with_capacity(plane);
    let mut residuals = Vec::with_capacity(plane);
    let mut quantized = vec![T::zero(); plane * dim];
    for p in 0..plane {
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for m in 0..codebook.size() {
            let d2 = squared_distance((0..dim).map(|d| field.data[d * plane + p]), codebook.vector(m));
            if d2 < best_d2 {
                best = m;
                best_d2 = d2;
            }
        }
        for (d, &v) in codebook.vector(best).iter().enumerate() {
            quantized[d * plane + p] = v;
        }
        indices.push(best);
        residuals.push(T::from(best_d2.sqrt()).unwrap_or_else(T::nan));
    }
    Ok(Quantization {
        indices,
        quantized: LatentField::new(field.height, field.width, dim, quantized)?,
        residuals,
    })
}
