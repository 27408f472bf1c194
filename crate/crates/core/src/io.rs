//! On-disk formats: dataset manifests, detection files, calibration
//! sidecars, training logs and PNG rasters.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detect::{BoxRect, DetectionBox};
use crate::error::{Result, VqadError};
use crate::maps::SsimParams;
use crate::raster::{BinaryMask, GrayMap, ImageTile};
use crate::synth::{gen_scene, quantize_8bit, SceneParams};
use crate::trainer::{AmNormalizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Generator stream id, kept distinct from the stream used by
    /// stand-alone tiles.
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = VqadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(VqadError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub boxes: Vec<BoxRect>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Checks path uniqueness and the normal-only training contract.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                return Err(VqadError::Data(format!("duplicate manifest path {}", r.path)));
            }
            if r.split == Split::Train && !r.boxes.is_empty() {
                return Err(VqadError::Data(format!(
                    "training record {} carries {} box(es); training data must be normal-only",
                    r.path,
                    r.boxes.len()
                )));
            }
            if r.boxes.iter().any(|b| b.w == 0 || b.h == 0) {
                return Err(VqadError::Data(format!("record {} has an empty box", r.path)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, path: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.path == path)
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(manifest_path)?;
        manifest.validate()?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    /// Loads the tiles and boxes of one split, checking boxes against the image size.
    pub fn load_split(&self, split: Split) -> Result<Vec<(String, ImageTile, Vec<BoxRect>)>> {
        self.manifest
            .split(split)
            .map(|r| {
                let tile = read_tile(&self.root.join(&r.path))?;
                if let Some(b) = r.boxes.iter().find(|b| !b.fits_within(tile.width(), tile.height())) {
                    return Err(VqadError::Data(format!("box {b:?} lies outside image {}", r.path)));
                }
                Ok((r.path.clone(), tile, r.boxes.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub boxes: Vec<DetectionBox>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub detections: Vec<DetectionRecord>,
}

impl DetectionFile {
    pub fn validate(&self) -> Result<()> {
        for r in &self.detections {
            if r.boxes.iter().any(|b| !b.score.is_finite() || b.w == 0 || b.h == 0) {
                return Err(VqadError::Data(format!("invalid detection box for {}", r.image)));
            }
        }
        Ok(())
    }
}

/// Written next to a checkpoint as `<checkpoint>.calib.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSidecar {
    pub normalizer: AmNormalizer,
    pub train: TrainConfig,
    #[serde(default)]
    pub ssim: SsimParams,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".calib.json");
    PathBuf::from(s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| VqadError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| VqadError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| VqadError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| VqadError::io(path, e))
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| VqadError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let to_io = |e: png::EncodingError| VqadError::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB (or gray for single-channel tiles).
pub fn write_tile(path: &Path, tile: &ImageTile) -> Result<()> {
    let (h, w, c) = tile.shape();
    let bytes: Vec<u8> = tile.to_interleaved().into_iter().map(to_u8).collect();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => return Err(VqadError::Shape(format!("cannot write a {other}-channel tile as PNG"))),
    };
    encode_png(path, w, h, color, png::BitDepth::Eight, &bytes)
}

/// Reads an 8-bit PNG as an RGB tile (alpha dropped, gray replicated).
pub fn read_tile(path: &Path) -> Result<ImageTile> {
    let file = File::open(path).map_err(|e| VqadError::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let bad = |e: png::DecodingError| VqadError::corrupt(path, e.to_string());
    let mut reader = dec.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VqadError::corrupt(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(src_channels) {
        let pick = |c: usize| px[if src_channels < 3 { 0 } else { c }] as f32 / 255.0;
        rgb.extend([pick(0), pick(1), pick(2)]);
    }
    ImageTile::from_interleaved(h, w, 3, &rgb)
}

/// 16-bit grayscale: value * 65535, clamped.
pub fn write_map16(path: &Path, map: &GrayMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.data().len() * 2);
    for &v in map.data() {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    encode_png(path, map.width(), map.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// 1-bit grayscale, rows padded to whole bytes.
pub fn write_mask1(path: &Path, mask: &BinaryMask) -> Result<()> {
    let row_bytes = mask.width().div_ceil(8);
    let mut bytes = vec![0u8; row_bytes * mask.height()];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                bytes[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, png::BitDepth::One, &bytes)
}

/// The tile with 1-pixel rectangle outlines: truth in green, predictions in red.
pub fn write_overlay(path: &Path, tile: &ImageTile, truth: &[BoxRect], predicted: &[BoxRect]) -> Result<()> {
    let (h, w, c) = tile.shape();
    let mut rgb: Vec<u8> = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                rgb.push(to_u8(tile.get(y, x, if c == 1 { 0 } else { ch })));
            }
        }
    }
    let mut outline = |b: &BoxRect, colour: [u8; 3]| {
        let (x0, y0) = (b.x as usize, b.y as usize);
        let (x1, y1) = ((x0 + b.w as usize).min(w) - 1, (y0 + b.h as usize).min(h) - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if y == y0 || y == y1 || x == x0 || x == x1 {
                    rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&colour);
                }
            }
        }
    };
    for b in truth {
        outline(b, [0, 255, 0]);
    }
    for b in predicted {
        outline(b, [255, 0, 0]);
    }
    encode_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &rgb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scene: SceneParams,
    pub counts: SplitCounts,
    /// Share of anomalous tiles in the val and test splits.
    pub anomalous_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneParams::default(),
            counts: SplitCounts {
                train: 2000,
                val: 100,
                test: 400,
            },
            anomalous_fraction: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if !(0.0..=1.0).contains(&self.anomalous_fraction) {
            return Err(VqadError::Config("anomalous_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn anomalous_count(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            _ => (self.counts.get(split) as f64 * self.anomalous_fraction).round() as usize,
        }
    }

    /// Spreads the anomalous tiles evenly through the split; exactly
    /// `anomalous_count` indices are anomalous.
    pub fn is_anomalous(&self, split: Split, index: usize) -> bool {
        let (n, k) = (self.counts.get(split), self.anomalous_count(split));
        n > 0 && (index + 1) * k / n > index * k / n
    }
}

/// One generated tile with its location in the dataset.
#[derive(Debug, Clone)]
pub struct GeneratedTile {
    pub path: String,
    pub split: Split,
    pub tile: ImageTile,
    pub boxes: Vec<BoxRect>,
}

/// Generates one split in memory, with the same 8-bit quantization a PNG
/// round trip applies.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<GeneratedTile>> {
    spec.validate()?;
    use rayon::prelude::*;
    (0..spec.counts.get(split))
        .into_par_iter()
        .map(|i| {
            let scene = gen_scene(&spec.scene, split.stream(), i as u64, spec.is_anomalous(split, i))?;
            Ok(GeneratedTile {
                path: format!("{}/{:05}.png", split.name(), i),
                split,
                boxes: scene.boxes(),
                tile: quantize_8bit(&scene.tile),
            })
        })
        .collect()
}

/// Writes all tiles as PNG under `out_dir` plus `out_dir/manifest.json`.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut manifest = Manifest::default();
    for split in Split::ALL {
        let dir = out_dir.join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| VqadError::io(&dir, e))?;
        for g in generate_split(spec, split)? {
            write_tile(&out_dir.join(&g.path), &g.tile)?;
            manifest.records.push(ManifestRecord {
                path: g.path,
                split: g.split,
                boxes: g.boxes,
            });
        }
    }
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
