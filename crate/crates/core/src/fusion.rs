//! Hysteresis double thresholding: connected components of the thresholded
//! SSIM map survive only if they touch the thresholded alignment map.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqadError};
use crate::raster::{BinaryMask, GrayMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = VqadError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(VqadError::Config(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }
}

/// Inclusive axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// `(y, x)` pixels in discovery order.
    pub pixels: Vec<(usize, usize)>,
    pub bounds: PixelRect,
}

/// Labeled connected components. Label 0 is background; ids `1..=count`
/// follow the raster order of each component's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSet {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn count(&self) -> usize {
        self.components.len()
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Component with the given 1-based id.
    pub fn component(&self, id: u32) -> &Component {
        &self.components[id as usize - 1]
    }
}

/// Foreground wherever `value >= threshold`.
pub fn binarize(map: &GrayMap, threshold: f32) -> BinaryMask {
    BinaryMask::new(
        map.height(),
        map.width(),
        map.data().iter().map(|&v| v >= threshold).collect(),
    )
    .expect("same shape as source")
}

pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentSet {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        let (sy, sx) = (start / w, start % w);
        labels[start] = id;
        queue.push_back((sy, sx));
        let mut pixels = Vec::new();
        let mut bounds = PixelRect {
            y0: sy,
            x0: sx,
            y1: sy,
            x1: sx,
        };
        while let Some((y, x)) = queue.pop_front() {
            pixels.push((y, x));
            bounds.y0 = bounds.y0.min(y);
            bounds.y1 = bounds.y1.max(y);
            bounds.x0 = bounds.x0.min(x);
            bounds.x1 = bounds.x1.max(x);
            for &(dy, dx) in connectivity.offsets() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if mask.data()[n] && labels[n] == 0 {
                    labels[n] = id;
                    queue.push_back((ny as usize, nx as usize));
                }
            }
        }
        components.push(Component { pixels, bounds });
    }
    ComponentSet {
        height: h,
        width: w,
        labels,
        components,
    }
}

/// Keeps the components of `sm_mask` that share at least one pixel with `markers`.
pub fn reconstruct_by_markers(sm_mask: &BinaryMask, markers: &BinaryMask, connectivity: Connectivity) -> Result<BinaryMask> {
    if sm_mask.height() != markers.height() || sm_mask.width() != markers.width() {
        return Err(VqadError::Shape(format!(
            "mask {}x{} vs markers {}x{}",
            sm_mask.height(),
            sm_mask.width(),
            markers.height(),
            markers.width()
        )));
    }
    let set = label_components(sm_mask, connectivity);
    let mut keep = vec![false; set.count() + 1];
    for (i, &label) in set.labels.iter().enumerate() {
        if label != 0 && markers.data()[i] {
            keep[label as usize] = true;
        }
    }
    BinaryMask::new(
        sm_mask.height(),
        sm_mask.width(),
        set.labels.iter().map(|&l| l != 0 && keep[l as usize]).collect(),
    )
}

/// Segment SM at `lambda_sm`, segment AM at `lambda_am`, label the SM mask,
/// and keep the SM components with non-null intersection with the AM mask.
pub fn hysteresis_select(
    sm: &GrayMap,
    am: &GrayMap,
    lambda_sm: f32,
    lambda_am: f32,
    connectivity: Connectivity,
) -> Result<BinaryMask> {
    if !sm.same_shape(am) {
        return Err(VqadError::Shape(format!(
            "SM {}x{} vs AM {}x{}",
            sm.height(),
            sm.width(),
            am.height(),
            am.width()
        )));
    }
    reconstruct_by_markers(&binarize(sm, lambda_sm), &binarize(am, lambda_am), connectivity)
}
