//! Independent reference implementations used as test oracles. None of
//! these call into the code paths they check.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqad::model::{LatentField, ModelConfig, VqVae};
use vqad::{BinaryMask, GrayMap, ImageTile};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Finite differences on the straight-through surrogate
// ---------------------------------------------------------------------------

/// The loss whose true gradient equals the straight-through gradient at the
/// base point: code assignments and `z_q - z_e` offsets are frozen, the
/// codebook term sees a frozen encoder output and the commitment term a
/// frozen codebook.
pub struct FrozenSurrogate {
    tile: Vec<f64>,
    offset: Vec<f64>,
    z_e0: Vec<f64>,
    z_q0: Vec<f64>,
    indices: Vec<usize>,
    cells: usize,
    dim: usize,
    beta: f64,
}

impl FrozenSurrogate {
    pub fn at(model: &VqVae<f64>, tile: &ImageTile) -> Self {
        let z = model.encode(tile).unwrap();
        let q = model.quantize(&z).unwrap();
        let offset = q
            .quantized
            .as_slice()
            .iter()
            .zip(z.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        Self {
            tile: tile.planar().iter().map(|&v| v as f64).collect(),
            offset,
            z_e0: z.as_slice().to_vec(),
            z_q0: q.quantized.as_slice().to_vec(),
            indices: q.indices.clone(),
            cells: z.height() * z.width(),
            dim: z.dim(),
            beta: model.config().commitment_beta,
        }
    }

    pub fn eval(&self, model: &VqVae<f64>, tile: &ImageTile) -> f64 {
        let z = model.encode(tile).unwrap();
        let shifted: Vec<f64> = z.as_slice().iter().zip(&self.offset).map(|(a, b)| a + b).collect();
        let input = LatentField::new(z.height(), z.width(), z.dim(), shifted).unwrap();
        let recon = model.decode_raw(&input).unwrap();
        let rec = recon.iter().zip(&self.tile).map(|(r, t)| (r - t).powi(2)).sum::<f64>() / self.tile.len() as f64;

        let plane = self.cells;
        let mut cb = 0.0;
        for (p, &k) in self.indices.iter().enumerate() {
            for (d, e) in model.codebook().vector(k).iter().enumerate() {
                cb += (self.z_e0[d * plane + p] - e).powi(2);
            }
        }
        cb /= self.cells as f64;
        let com = z
            .as_slice()
            .iter()
            .zip(&self.z_q0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / self.cells as f64;
        rec + cb + self.beta * com
    }
}

/// Fourth-order central finite differences of the surrogate w.r.t. every
/// parameter: `(-f(2h) + 8 f(h) - 8 f(-h) + f(-2h)) / 12h`.
pub fn finite_difference_grads(model: &VqVae<f64>, tile: &ImageTile, h: f64) -> Vec<Vec<f64>> {
    let surrogate = FrozenSurrogate::at(model, tile);
    let mut work = model.clone();
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let base = work.tensors()[ti][i];
            let mut at = |delta: f64| {
                work.tensors_mut()[ti][i] = base + delta;
                surrogate.eval(&work, tile)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            work.tensors_mut()[ti][i] = base;
            *gi = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all components.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        base_width: 3,
        latent_dim: 3,
        codebook_size: 4,
        downsample_factor: 2,
        commitment_beta: 0.25,
        seed: 11,
    }
}

pub fn random_tile(rng: &mut ChaCha8Rng, side: usize, channels: usize) -> ImageTile {
    let data = (0..side * side * channels).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
    ImageTile::from_planar(side, side, channels, data).unwrap()
}

// ---------------------------------------------------------------------------
// Exhaustive nearest neighbour
// ---------------------------------------------------------------------------

/// Index of the nearest row (squared distance in f64), first index on ties.
pub fn exhaustive_nearest(cell: &[f32], codebook: &[Vec<f32>]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (m, code) in codebook.iter().enumerate() {
        let d: f64 = cell
            .iter()
            .zip(code)
            .map(|(&a, &b)| {
                let t = a as f64 - b as f64;
                t * t
            })
            .sum();
        if d < best.0 {
            best = (d, m);
        }
    }
    best.1
}

// ---------------------------------------------------------------------------
// Recursive flood fill and brute-force hysteresis
// ---------------------------------------------------------------------------

fn neighbours(eight: bool) -> Vec<(isize, isize)> {
    let mut v = Vec::new();
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            if (dy, dx) != (0, 0) && (eight || dy == 0 || dx == 0) {
                v.push((dy, dx));
            }
        }
    }
    v
}

fn fill(mask: &BinaryMask, seen: &mut [bool], y: usize, x: usize, eight: bool, out: &mut Vec<(usize, usize)>) {
    let w = mask.width();
    if seen[y * w + x] || !mask.get(y, x) {
        return;
    }
    seen[y * w + x] = true;
    out.push((y, x));
    for (dy, dx) in neighbours(eight) {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        if ny >= 0 && nx >= 0 && (ny as usize) < mask.height() && (nx as usize) < w {
            fill(mask, seen, ny as usize, nx as usize, eight, out);
        }
    }
}

/// Components as pixel sets, found by recursive flood fill.
pub fn flood_fill_components(mask: &BinaryMask, eight: bool) -> Vec<HashSet<(usize, usize)>> {
    let mut seen = vec![false; mask.height() * mask.width()];
    let mut comps = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) && !seen[y * mask.width() + x] {
                let mut pixels = Vec::new();
                fill(mask, &mut seen, y, x, eight, &mut pixels);
                comps.push(pixels.into_iter().collect());
            }
        }
    }
    comps
}

/// Hysteresis selection by brute force: threshold both maps, flood-fill the SM mask,
/// keep components whose pixel set intersects the AM mask.
pub fn brute_force_hysteresis(sm: &GrayMap, am: &GrayMap, lambda_sm: f32, lambda_am: f32, eight: bool) -> BinaryMask {
    let (h, w) = (sm.height(), sm.width());
    let sm_mask = BinaryMask::from_fn(h, w, |y, x| sm.get(y, x) >= lambda_sm);
    let markers: HashSet<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| am.get(y, x) >= lambda_am)
        .collect();
    let mut out = BinaryMask::empty(h, w);
    for comp in flood_fill_components(&sm_mask, eight) {
        if !comp.is_disjoint(&markers) {
            for &(y, x) in &comp {
                out.set(y, x, true);
            }
        }
    }
    out
}

/// Random map of blobby structure so components are non-trivial.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GrayMap {
    let coarse: Vec<f32> = (0..(h / 4 + 2) * (w / 4 + 2)).map(|_| rng.gen_range(0.0..1.0)).collect();
    let cw = w / 4 + 2;
    GrayMap::from_fn(h, w, |y, x| {
        let c = coarse[(y / 4) * cw + x / 4];
        (0.7 * c + 0.3 * rng.gen_range(0.0f32..1.0)).min(1.0)
    })
}
