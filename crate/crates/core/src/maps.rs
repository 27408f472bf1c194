//! The two anomaly evidences: the SSIM reconstruction map (SM) and the latent
//! alignment map (AM), plus AM's upsampling to image scale and the plain
//! pixelwise fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqadError};
use crate::model::{Quantization, Real};
use crate::raster::{GrayMap, ImageTile};
use crate::trainer::AmNormalizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window_side: usize,
    pub gaussian_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::with_dynamic_range(1.0)
    }
}

impl SsimParams {
    pub fn with_dynamic_range(l: f64) -> Self {
        Self {
            window_side: 11,
            gaussian_sigma: 1.5,
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
            dynamic_range: l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_side < 3 || self.window_side.is_multiple_of(2) {
            return Err(VqadError::Config(format!(
                "SSIM window side must be odd and >= 3, got {}",
                self.window_side
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.gaussian_sigma) || !positive(self.c1) || !positive(self.c2) || !positive(self.dynamic_range) {
            return Err(VqadError::Config("SSIM sigma, constants and range must be positive".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window_side / 2) as f64;
        let two_s2 = 2.0 * self.gaussian_sigma * self.gaussian_sigma;
        let raw: Vec<f64> = (0..self.window_side)
            .map(|i| (-(i as f64 - r).powi(2) / two_s2).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// The anomaly evidences of one tile at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMaps {
    /// `(1 - SSIM) / 2`, in `[0, 1]`.
    pub sm: GrayMap,
    /// Normalized quantization residuals, upsampled and dilated; `>= 0`.
    pub am: GrayMap,
}

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Separable Gaussian filtering of one plane with reflect padding.
fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * row[reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-pixel SSIM dissimilarity `(1 - SSIM) / 2`, SSIM averaged over channels.
pub fn ssim_map(x: &ImageTile, y: &ImageTile, p: &SsimParams) -> Result<GrayMap> {
    if !x.same_shape(y) {
        return Err(VqadError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    p.validate()?;
    let (h, w, channels) = x.shape();
    let kernel = p.kernel();
    let mut ssim = vec![0.0f64; h * w];
    for c in 0..channels {
        let a: Vec<f64> = x.plane(c).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.plane(c).iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v).collect();
        let mu_a = blur(&a, h, w, &kernel);
        let mu_b = blur(&b, h, w, &kernel);
        let e_aa = blur(&aa, h, w, &kernel);
        let e_bb = blur(&bb, h, w, &kernel);
        let e_ab = blur(&ab, h, w, &kernel);
        for i in 0..h * w {
            let var_a = e_aa[i] - mu_a[i] * mu_a[i];
            let var_b = e_bb[i] - mu_b[i] * mu_b[i];
            let cov = e_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + p.c1) * (2.0 * cov + p.c2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + p.c1) * (var_a + var_b + p.c2);
            ssim[i] += num / den;
        }
    }
    let data = ssim
        .into_iter()
        .map(|s| ((1.0 - s / channels as f64) / 2.0).clamp(0.0, 1.0) as f32)
        .collect();
    GrayMap::new(h, w, data)
}

/// Quantization residuals divided by the calibrated scale, on the latent grid.
pub fn alignment_field<T: Real>(q: &Quantization<T>, norm: &AmNormalizer) -> GrayMap {
    let scale = norm.scale;
    GrayMap::from_fn(q.height(), q.width(), |i, j| {
        (q.residual(i, j).to_f64().unwrap_or(f64::NAN) / scale) as f32
    })
}

/// Default structuring-element radius for a downsample factor: `ceil(f / 2)`.
pub fn default_selem_radius(factor: usize) -> usize {
    factor.div_ceil(2)
}

/// Offsets of a discrete disk `dy^2 + dx^2 <= r^2`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Grayscale dilation (local maximum) with a disk; out-of-image neighbours are ignored.
pub fn dilate(map: &GrayMap, radius: usize) -> GrayMap {
    if radius == 0 {
        return map.clone();
    }
    let (h, w) = (map.height() as isize, map.width() as isize);
    let offsets = disk(radius);
    GrayMap::from_fn(map.height(), map.width(), |y, x| {
        offsets
            .iter()
            .filter_map(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                (yy >= 0 && xx >= 0 && yy < h && xx < w).then(|| map.get(yy as usize, xx as usize))
            })
            .fold(f32::NEG_INFINITY, f32::max)
    })
}

pub fn upsample_nearest(map: &GrayMap, factor: usize) -> Result<GrayMap> {
    if factor == 0 {
        return Err(VqadError::Config("upsampling factor must be positive".into()));
    }
    Ok(GrayMap::from_fn(map.height() * factor, map.width() * factor, |y, x| {
        map.get(y / factor, x / factor)
    }))
}

/// Nearest-neighbour upsampling by `factor` followed by disk dilation.
pub fn upsample_am(am_latent: &GrayMap, factor: usize, selem_radius: usize) -> Result<GrayMap> {
    Ok(dilate(&upsample_nearest(am_latent, factor)?, selem_radius))
}

/// Min-max normalization to `[0, 1]`; constant maps become all zero.
pub fn normalize_min_max(map: &GrayMap) -> GrayMap {
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    GrayMap::from_fn(map.height(), map.width(), |y, x| {
        if span > 0.0 && span.is_finite() {
            (map.get(y, x) - lo) / span
        } else {
            0.0
        }
    })
}

/// Product of the min-max normalized maps.
pub fn fuse_pixelwise(sm: &GrayMap, am: &GrayMap) -> Result<GrayMap> {
    if !sm.same_shape(am) {
        return Err(VqadError::Shape(format!(
            "SM {}x{} vs AM {}x{}",
            sm.height(),
            sm.width(),
            am.height(),
            am.width()
        )));
    }
    let (s, a) = (normalize_min_max(sm), normalize_min_max(am));
    GrayMap::new(
        sm.height(),
        sm.width(),
        s.data().iter().zip(a.data()).map(|(u, v)| u * v).collect(),
    )
}
