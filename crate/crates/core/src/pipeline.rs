//! Per-tile inference: reconstruct, build SM and AM, fuse by hysteresis,
//! extract boxes. Also the validation sweep over the two thresholds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{extract_boxes, match_detections, score, BoxRect, DetectionBox, EvalReport, MatchCounts};
use crate::error::{Result, VqadError};
use crate::fusion::{hysteresis_select, Connectivity};
use crate::maps::{alignment_field, default_selem_radius, ssim_map, upsample_am, AnomalyMaps, SsimParams};
use crate::model::{ModelState, Quantization};
use crate::raster::{BinaryMask, ImageTile};
use crate::trainer::AmNormalizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub ssim: SsimParams,
    /// Disk radius for AM dilation; `None` means `ceil(f / 2)`.
    pub selem_radius: Option<usize>,
    pub connectivity: Connectivity,
    pub min_area: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default(),
            selem_radius: None,
            connectivity: Connectivity::Eight,
            min_area: 4,
        }
    }
}

/// Everything computed for a tile before thresholding.
#[derive(Debug, Clone)]
pub struct TileAnalysis {
    pub reconstruction: ImageTile,
    pub quantization: Quantization<f32>,
    pub maps: AnomalyMaps,
}

#[derive(Debug, Clone)]
pub struct Detector<'a> {
    pub model: &'a ModelState,
    pub normalizer: AmNormalizer,
    pub config: DetectorConfig,
}

impl<'a> Detector<'a> {
    pub fn new(model: &'a ModelState, normalizer: AmNormalizer, config: DetectorConfig) -> Self {
        Self {
            model,
            normalizer,
            config,
        }
    }

    pub fn selem_radius(&self) -> usize {
        self.config
            .selem_radius
            .unwrap_or_else(|| default_selem_radius(self.model.config().downsample_factor))
    }

    pub fn analyze(&self, tile: &ImageTile) -> Result<TileAnalysis> {
        let (reconstruction, quantization) = self.model.reconstruct(tile)?;
        let sm = ssim_map(tile, &reconstruction, &self.config.ssim)?;
        let am_latent = alignment_field(&quantization, &self.normalizer);
        let am = upsample_am(&am_latent, self.model.config().downsample_factor, self.selem_radius())?;
        Ok(TileAnalysis {
            reconstruction,
            quantization,
            maps: AnomalyMaps { sm, am },
        })
    }

    /// Analyzes tiles in parallel; results keep input order.
    pub fn analyze_all(&self, tiles: &[ImageTile]) -> Result<Vec<TileAnalysis>> {
        tiles.par_iter().map(|t| self.analyze(t)).collect()
    }

    /// Thresholds an analysis into the final binary map and its boxes.
    pub fn detect(&self, analysis: &TileAnalysis, lambda_sm: f32, lambda_am: f32) -> Result<(BinaryMask, Vec<DetectionBox>)> {
        let maps = &analysis.maps;
        let amap = hysteresis_select(&maps.sm, &maps.am, lambda_sm, lambda_am, self.config.connectivity)?;
        let boxes = extract_boxes(&amap, &maps.sm, self.config.min_area, self.config.connectivity)?;
        Ok((amap, boxes))
    }

    /// Matching counts over analyzed tiles at one threshold pair.
    pub fn evaluate(
        &self,
        analyses: &[TileAnalysis],
        truth: &[Vec<BoxRect>],
        lambda_sm: f32,
        lambda_am: f32,
        iou_threshold: f64,
    ) -> Result<MatchCounts> {
        let mut counts = MatchCounts::default();
        for (a, gt) in analyses.iter().zip(truth) {
            let (_, boxes) = self.detect(a, lambda_sm, lambda_am)?;
            let pred: Vec<BoxRect> = boxes.iter().map(|b| b.rect()).collect();
            counts += match_detections(&pred, gt, iou_threshold).counts;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub lambda_sm: f32,
    pub lambda_am: f32,
    pub report: EvalReport,
}

fn sorted_unique(grid: &[f32]) -> Result<Vec<f32>> {
    if grid.is_empty() {
        return Err(VqadError::Config("threshold grid is empty".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(VqadError::Config("threshold grid contains non-finite values".into()));
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.total_cmp(b));
    g.dedup();
    Ok(g)
}

/// Exhaustive grid search on pre-analyzed validation tiles. Picks the
/// highest F1; ties go to higher precision, then lower `lambda_sm`, then
/// lower `lambda_am`.
pub fn sweep_analyzed(
    detector: &Detector<'_>,
    analyses: &[TileAnalysis],
    truth: &[Vec<BoxRect>],
    grid_sm: &[f32],
    grid_am: &[f32],
    iou_threshold: f64,
) -> Result<SweepResult> {
    let (gs, ga) = (sorted_unique(grid_sm)?, sorted_unique(grid_am)?);
    if analyses.is_empty() || analyses.len() != truth.len() {
        return Err(VqadError::Data("validation set is empty or lacks ground truth".into()));
    }
    let pairs: Vec<(f32, f32)> = gs.iter().flat_map(|&s| ga.iter().map(move |&a| (s, a))).collect();
    let results: Vec<Result<SweepResult>> = pairs
        .par_iter()
        .map(|&(s, a)| {
            let counts = detector.evaluate(analyses, truth, s, a, iou_threshold)?;
            Ok(SweepResult {
                lambda_sm: s,
                lambda_am: a,
                report: score(counts),
            })
        })
        .collect();
    let mut best: Option<SweepResult> = None;
    // Candidates arrive in ascending (lambda_sm, lambda_am) order, so a
    // strict improvement test keeps the lowest thresholds among exact ties.
    for r in results {
        let r = r?;
        let better = match &best {
            None => true,
            Some(b) => {
                r.report.f1 > b.report.f1 || (r.report.f1 == b.report.f1 && r.report.precision > b.report.precision)
            }
        };
        if better {
            best = Some(r);
        }
    }
    Ok(best.expect("grids are nonempty"))
}

/// Analyzes the validation tiles and runs [`sweep_analyzed`].
pub fn sweep_thresholds(
    detector: &Detector<'_>,
    validation: &[(ImageTile, Vec<BoxRect>)],
    grid_sm: &[f32],
    grid_am: &[f32],
    iou_threshold: f64,
) -> Result<SweepResult> {
    sorted_unique(grid_sm)?;
    sorted_unique(grid_am)?;
    if validation.is_empty() {
        return Err(VqadError::Data("validation set is empty".into()));
    }
    let tiles: Vec<ImageTile> = validation.iter().map(|(t, _)| t.clone()).collect();
    let truth: Vec<Vec<BoxRect>> = validation.iter().map(|(_, b)| b.clone()).collect();
    let analyses = detector.analyze_all(&tiles)?;
    sweep_analyzed(detector, &analyses, &truth, grid_sm, grid_am, iou_threshold)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive (`n = 1` gives `lo`).
pub fn linear_grid(lo: f32, hi: f32, n: usize) -> Result<Vec<f32>> {
    if n == 0 {
        return Err(VqadError::Config("grid needs at least one point".into()));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (lo64, hi64) = (lo as f64, hi as f64);
    Ok((0..n)
        .map(|i| (lo64 + (hi64 - lo64) * i as f64 / (n - 1) as f64) as f32)
        .collect())
}
