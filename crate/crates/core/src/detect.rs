//! Detection boxes from binary anomaly maps, one-to-one IoU matching against
//! ground truth, and precision / recall / F1.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqadError};
use crate::fusion::{label_components, Connectivity};
use crate::raster::{BinaryMask, GrayMap};

/// Pixel rectangle: top-left corner plus extents; covers `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BoxRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoxRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.w > 0
            && self.h > 0
            && (self.x as usize + self.w as usize) <= width
            && (self.y as usize + self.h as usize) <= height
    }

    pub fn intersection(&self, other: &BoxRect) -> u64 {
        let overlap = |a0: u32, al: u32, b0: u32, bl: u32| {
            let lo = a0.max(b0) as i64;
            let hi = (a0 as i64 + al as i64).min(b0 as i64 + bl as i64);
            (hi - lo).max(0) as u64
        };
        overlap(self.x, self.w, other.x, other.w) * overlap(self.y, self.h, other.y, other.h)
    }

    pub fn iou(&self, other: &BoxRect) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// A predicted box with its mean SM score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub score: f64,
}

impl DetectionBox {
    pub fn rect(&self) -> BoxRect {
        BoxRect::new(self.x, self.y, self.w, self.h)
    }
}

/// One box per connected component of `amap` with at least `min_area`
/// pixels, in component-id order. Score is the mean SM over the component.
pub fn extract_boxes(
    amap: &BinaryMask,
    sm: &GrayMap,
    min_area: usize,
    connectivity: Connectivity,
) -> Result<Vec<DetectionBox>> {
    if amap.height() != sm.height() || amap.width() != sm.width() {
        return Err(VqadError::Shape(format!(
            "Amap {}x{} vs SM {}x{}",
            amap.height(),
            amap.width(),
            sm.height(),
            sm.width()
        )));
    }
    let set = label_components(amap, connectivity);
    Ok(set
        .components
        .iter()
        .filter(|c| c.pixels.len() >= min_area)
        .map(|c| {
            let score = c.pixels.iter().map(|&(y, x)| sm.get(y, x) as f64).sum::<f64>() / c.pixels.len() as f64;
            DetectionBox {
                x: c.bounds.x0 as u32,
                y: c.bounds.y0 as u32,
                w: c.bounds.width() as u32,
                h: c.bounds.height() as u32,
                score,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// True/false positive and false negative counts. Forms a commutative
/// monoid under `+`, so per-image results aggregate in any order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for MatchCounts {
    type Output = MatchCounts;

    fn add(self, o: MatchCounts) -> MatchCounts {
        MatchCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, o: MatchCounts) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub counts: MatchCounts,
    pub pairs: Vec<MatchPair>,
}

/// Greedy one-to-one matching in descending IoU; a pair counts only if its
/// IoU reaches `iou_threshold`. Equal IoUs are ordered by box geometry, so
/// the counts do not depend on the order of the input lists.
pub fn match_detections(pred: &[BoxRect], gt: &[BoxRect], iou_threshold: f64) -> MatchResult {
    let mut candidates: Vec<MatchPair> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let iou = p.iou(g);
            if iou > 0.0 && iou >= iou_threshold {
                candidates.push(MatchPair { pred: pi, gt: gi, iou });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then_with(|| pred[a.pred].cmp(&pred[b.pred]))
            .then_with(|| gt[a.gt].cmp(&gt[b.gt]))
            .then_with(|| (a.pred, a.gt).cmp(&(b.pred, b.gt)))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !pred_used[c.pred] && !gt_used[c.gt] {
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            pairs.push(c);
        }
    }
    let tp = pairs.len() as u64;
    MatchResult {
        counts: MatchCounts {
            tp,
            fp: pred.len() as u64 - tp,
            fn_: gt.len() as u64 - tp,
        },
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from_rates(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn score(counts: MatchCounts) -> EvalReport {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    EvalReport {
        precision,
        recall,
        f1: f1_from_rates(precision, recall),
        tp: counts.tp,
        fp: counts.fp,
        fn_: counts.fn_,
    }
}
