//! Procedural stand-in for aerial sea-surface imagery.
//!
//! Normal tiles are two-octave value noise around a sea colour, optionally
//! corrupted by a saturated glare streak and a patch of bright foam speckle.
//! Anomalous tiles add soft elliptical "animal" blobs, some at reduced
//! contrast, with exact ground-truth boxes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::BoxRect;
use crate::error::{Result, VqadError};
use crate::raster::{BinaryMask, ImageTile};

const SEA_COLOUR: [f64; 3] = [0.38, 0.52, 0.62];
const WAVE_AMPLITUDE: f64 = 0.06;
/// Fraction of an ellipse's radius over which a blob fades out.
const SOFT_EDGE: f64 = 0.35;
/// Probability that a blob is rendered at reduced (submerged) contrast.
const DEPTH_PROB: f64 = 0.3;
const DEPTH_RANGE: (f64, f64) = (0.55, 0.8);
/// Minimum free pixels between ground-truth boxes.
const BOX_GAP: u32 = 8;
const PLACEMENT_RETRIES: usize = 100;
/// Intensity added by one foam speckle.
const FOAM_BRIGHTNESS: (f64, f64) = (0.08, 0.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub tile_side: usize,
    /// Lattice spacing of the coarse noise octave, in pixels.
    pub wave_scale: f64,
    pub glare_prob: f64,
    pub foam_prob: f64,
    /// Intensity added at the core of a glare streak.
    pub glare_strength: f64,
    /// Foam speckles per pixel of tile area.
    pub foam_density: f64,
    pub animal_count_range: (usize, usize),
    /// Major-axis extent of a blob, in pixels.
    pub animal_size_range: (usize, usize),
    /// Signed intensity offset at the centre of a fully visible blob.
    pub animal_contrast: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            tile_side: 64,
            wave_scale: 12.0,
            glare_prob: 0.25,
            foam_prob: 0.25,
            glare_strength: 0.9,
            foam_density: 0.008,
            animal_count_range: (1, 3),
            animal_size_range: (6, 12),
            animal_contrast: -0.3,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.glare_prob) || !prob(self.foam_prob) {
            return Err(VqadError::Config("glare_prob and foam_prob must lie in [0, 1]".into()));
        }
        if self.tile_side < 8 {
            return Err(VqadError::Config(format!("tile side {} is too small", self.tile_side)));
        }
        if !(self.wave_scale.is_finite() && self.wave_scale > 0.0) {
            return Err(VqadError::Config("wave_scale must be positive".into()));
        }
        let (smin, smax) = self.animal_size_range;
        if smin == 0 || smin > smax || smax > self.tile_side / 2 {
            return Err(VqadError::Config(format!(
                "animal size range ({smin}, {smax}) must satisfy 0 < min <= max <= tile_side / 2"
            )));
        }
        let (cmin, cmax) = self.animal_count_range;
        if cmin > cmax {
            return Err(VqadError::Config("animal count range has min > max".into()));
        }
        if !(self.glare_strength.is_finite() && self.foam_density.is_finite() && self.animal_contrast.is_finite())
            || self.foam_density < 0.0
        {
            return Err(VqadError::Config("glare, foam and contrast parameters must be finite".into()));
        }
        Ok(())
    }
}

/// One injected blob and its exact support.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub rect: BoxRect,
    pub support: BinaryMask,
    /// Contrast multiplier: 1 at full blend, below 1 for submerged blobs.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub tile: ImageTile,
    pub has_glare: bool,
    pub has_foam: bool,
    pub blobs: Vec<Blob>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BoxRect> {
        self.blobs.iter().map(|b| b.rect).collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-tile seed from `(seed, stream, index)`.
pub fn tile_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in `[-1, 1]` on a lattice of the given spacing.
fn value_noise(side: usize, spacing: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = (side as f64 / spacing).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let (oy, ox) = (rng.gen_range(0.0..spacing), rng.gen_range(0.0..spacing));
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        let fy = (y as f64 + oy) / spacing;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..side {
            let fx = (x as f64 + ox) / spacing;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |r: usize, c: usize| lattice[r * cells + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * side + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

struct Canvas {
    side: usize,
    /// Planar RGB in unclamped float.
    data: Vec<f64>,
}

impl Canvas {
    fn add(&mut self, y: usize, x: usize, v: f64) {
        let plane = self.side * self.side;
        for c in 0..3 {
            self.data[c * plane + y * self.side + x] += v;
        }
    }

    fn into_tile(self) -> ImageTile {
        let side = self.side;
        ImageTile::from_planar_clamped(side, side, 3, self.data.into_iter().map(|v| v as f32).collect())
    }
}

fn render_sea(p: &SceneParams, rng: &mut ChaCha8Rng) -> Canvas {
    let side = p.tile_side;
    let coarse = value_noise(side, p.wave_scale, rng);
    let fine = value_noise(side, (p.wave_scale / 2.0).max(1.0), rng);
    let plane = side * side;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let n = 0.65 * coarse[i] + 0.35 * fine[i];
        for c in 0..3 {
            data[c * plane + i] = SEA_COLOUR[c] + WAVE_AMPLITUDE * n;
        }
    }
    Canvas { side, data }
}

fn render_glare(p: &SceneParams, rng: &mut ChaCha8Rng, canvas: &mut Canvas) {
    let side = p.tile_side as f64;
    let (cy, cx) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
    let theta = rng.gen_range(0.0..PI);
    let half_len = rng.gen_range(0.25..0.5) * side;
    let half_width = rng.gen_range(1.0..3.0);
    let halo = 3.0;
    let (dir_y, dir_x) = (theta.sin(), theta.cos());
    for y in 0..p.tile_side {
        for x in 0..p.tile_side {
            let (ry, rx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let along = (ry * dir_y + rx * dir_x).abs();
            let across = (ry * dir_x - rx * dir_y).abs();
            if along > half_len + halo || across > half_width + halo {
                continue;
            }
            let fade = |d: f64, core: f64| if d <= core { 1.0 } else { 1.0 - (d - core) / halo };
            let w = fade(across, half_width) * fade(along, half_len);
            if w > 0.0 {
                canvas.add(y, x, p.glare_strength * w);
            }
        }
    }
}

fn render_foam(p: &SceneParams, rng: &mut ChaCha8Rng, canvas: &mut Canvas) {
    let side = p.tile_side as f64;
    let (cy, cx) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
    let spread = side / 8.0;
    let count = (p.foam_density * side * side).round() as usize;
    for _ in 0..count {
        // Box-Muller for a Gaussian cluster around the patch centre.
        let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen_range(0.0..1.0));
        let r = (-2.0 * u1.ln()).sqrt() * spread;
        let (y, x) = (cy + r * (2.0 * PI * u2).sin(), cx + r * (2.0 * PI * u2).cos());
        let brightness = rng.gen_range(FOAM_BRIGHTNESS.0..FOAM_BRIGHTNESS.1);
        if y >= 0.0 && x >= 0.0 && y < side && x < side {
            canvas.add(y as usize, x as usize, brightness);
        }
    }
}

/// Soft ellipse: `alpha` per pixel and its support `alpha > 0`.
struct Ellipse {
    cy: f64,
    cx: f64,
    semi_major: f64,
    semi_minor: f64,
    theta: f64,
}

impl Ellipse {
    fn alpha(&self, y: usize, x: usize) -> f64 {
        let (ry, rx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = rx * c + ry * s;
        let v = -rx * s + ry * c;
        let rho = ((u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2)).sqrt();
        ((1.0 - rho) / SOFT_EDGE).clamp(0.0, 1.0)
    }

    fn support(&self, side: usize) -> BinaryMask {
        BinaryMask::from_fn(side, side, |y, x| self.alpha(y, x) > 0.0)
    }
}

fn bounding_rect(mask: &BinaryMask) -> Option<BoxRect> {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0 != usize::MAX).then(|| BoxRect::new(x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32))
}

fn too_close(a: &BoxRect, b: &BoxRect) -> bool {
    let grown = BoxRect::new(
        a.x.saturating_sub(BOX_GAP),
        a.y.saturating_sub(BOX_GAP),
        a.w + 2 * BOX_GAP,
        a.h + 2 * BOX_GAP,
    );
    grown.intersection(b) > 0
}

fn render_animals(p: &SceneParams, rng: &mut ChaCha8Rng, canvas: &mut Canvas) -> Vec<Blob> {
    let side = p.tile_side;
    let (cmin, cmax) = p.animal_count_range;
    let (smin, smax) = p.animal_size_range;
    let wanted = rng.gen_range(cmin..=cmax);
    let mut blobs: Vec<Blob> = Vec::new();
    let mut placed: Vec<(Ellipse, f64)> = Vec::new();
    'blobs: for _ in 0..wanted {
        for _ in 0..PLACEMENT_RETRIES {
            let major = rng.gen_range(smin as f64..=smax as f64);
            let minor = major * rng.gen_range(0.5..=1.0);
            let theta = rng.gen_range(0.0..PI);
            let margin = major / 2.0 + 1.0;
            let hi = side as f64 - margin;
            let (cy, cx) = (rng.gen_range(margin..hi.max(margin + 1e-9)), rng.gen_range(margin..hi.max(margin + 1e-9)));
            let depth = if rng.gen_bool(DEPTH_PROB) {
                rng.gen_range(DEPTH_RANGE.0..DEPTH_RANGE.1)
            } else {
                1.0
            };
            let ellipse = Ellipse {
                cy,
                cx,
                semi_major: (major / 2.0).max(0.5),
                semi_minor: (minor / 2.0).max(0.5),
                theta,
            };
            let support = ellipse.support(side);
            let Some(rect) = bounding_rect(&support) else {
                continue;
            };
            if blobs.iter().any(|b| too_close(&b.rect, &rect)) {
                continue;
            }
            blobs.push(Blob { rect, support, depth });
            placed.push((ellipse, depth));
            continue 'blobs;
        }
        // Placement failed too often: settle for fewer blobs.
        break;
    }
    for ((ellipse, depth), blob) in placed.iter().zip(&blobs) {
        let r = blob.rect;
        for y in r.y as usize..(r.y + r.h) as usize {
            for x in r.x as usize..(r.x + r.w) as usize {
                let a = ellipse.alpha(y, x);
                if a > 0.0 {
                    canvas.add(y, x, p.animal_contrast * depth * a);
                }
            }
        }
    }
    blobs
}

/// Renders one scene. `stream` separates independent tile families (e.g.
/// dataset splits); anomalous scenes share their background with the
/// normal scene of the same key.
pub fn gen_scene(p: &SceneParams, stream: u64, index: u64, anomalous: bool) -> Result<Scene> {
    p.validate()?;
    let seed = tile_seed(p.seed, stream, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = render_sea(p, &mut rng);
    let has_glare = rng.gen_bool(p.glare_prob);
    let has_foam = rng.gen_bool(p.foam_prob);
    if has_glare {
        render_glare(p, &mut rng, &mut canvas);
    }
    if has_foam {
        render_foam(p, &mut rng, &mut canvas);
    }
    let blobs = if anomalous {
        let mut animal_rng = ChaCha8Rng::seed_from_u64(seed);
        animal_rng.set_stream(1);
        render_animals(p, &mut animal_rng, &mut canvas)
    } else {
        Vec::new()
    };
    Ok(Scene {
        tile: canvas.into_tile(),
        has_glare,
        has_foam,
        blobs,
    })
}

/// A normal (animal-free) tile, deterministic in `(seed, index)`.
pub fn gen_normal(p: &SceneParams, index: u64) -> Result<ImageTile> {
    Ok(gen_scene(p, 0, index, false)?.tile)
}

/// The normal tile for `(seed, index)` with blobs injected, plus their boxes.
pub fn gen_anomalous(p: &SceneParams, index: u64) -> Result<(ImageTile, Vec<BoxRect>)> {
    let scene = gen_scene(p, 0, index, true)?;
    let boxes = scene.boxes();
    Ok((scene.tile, boxes))
}

/// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize_8bit(tile: &ImageTile) -> ImageTile {
    let (h, w, c) = tile.shape();
    ImageTile::from_planar_clamped(
        h,
        w,
        c,
        tile.planar().iter().map(|&v| (v * 255.0).round() / 255.0).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_tiles_are_deterministic() {
        let p = SceneParams::default();
        assert_eq!(gen_normal(&p, 5).unwrap(), gen_normal(&p, 5).unwrap());
        assert_ne!(gen_normal(&p, 5).unwrap(), gen_normal(&p, 6).unwrap());
    }

    #[test]
    fn clean_sea_stays_inside_noise_band() {
        let p = SceneParams {
            glare_prob: 0.0,
            foam_prob: 0.0,
            ..SceneParams::default()
        };
        let lo = SEA_COLOUR.iter().cloned().fold(f64::INFINITY, f64::min) - WAVE_AMPLITUDE;
        let hi = SEA_COLOUR.iter().cloned().fold(0.0, f64::max) + WAVE_AMPLITUDE;
        for i in 0..20 {
            let t = gen_normal(&p, i).unwrap();
            assert!(t.planar().iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(t.planar().iter().all(|&v| (v as f64) >= lo - 1e-6 && (v as f64) <= hi + 1e-6));
        }
    }

    #[test]
    fn exact_animal_count_within_bounds() {
        let p = SceneParams {
            animal_count_range: (3, 3),
            ..SceneParams::default()
        };
        for i in 0..20 {
            let (t, boxes) = gen_anomalous(&p, i).unwrap();
            assert_eq!(boxes.len(), 3);
            assert!(boxes.iter().all(|b| b.fits_within(t.width(), t.height())));
        }
    }

    #[test]
    fn zero_contrast_leaves_background_untouched() {
        let p = SceneParams {
            animal_contrast: 0.0,
            ..SceneParams::default()
        };
        for i in 0..10 {
            assert_eq!(gen_anomalous(&p, i).unwrap().0, gen_normal(&p, i).unwrap());
        }
    }

    #[test]
    fn boxes_bound_supports_and_never_touch() {
        let p = SceneParams {
            animal_count_range: (2, 4),
            ..SceneParams::default()
        };
        for i in 0..30 {
            let scene = gen_scene(&p, 3, i, true).unwrap();
            for (k, b) in scene.blobs.iter().enumerate() {
                assert_eq!(bounding_rect(&b.support), Some(b.rect));
                for other in &scene.blobs[k + 1..] {
                    assert_eq!(b.rect.intersection(&other.rect), 0);
                }
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = [
            SceneParams {
                glare_prob: 1.5,
                ..SceneParams::default()
            },
            SceneParams {
                animal_size_range: (0, 4),
                ..SceneParams::default()
            },
            SceneParams {
                animal_size_range: (8, 40),
                ..SceneParams::default()
            },
            SceneParams {
                animal_count_range: (3, 1),
                ..SceneParams::default()
            },
        ];
        for p in bad {
            assert!(matches!(gen_normal(&p, 0), Err(VqadError::Config(_))));
        }
    }
}
