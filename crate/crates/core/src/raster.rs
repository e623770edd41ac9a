//! Weak segmentation ground truth from box annotations.
//!
//! Each grid cell takes the class of the box containing its center. When
//! several boxes contain it, the box with the smallest area wins (ties: lower
//! class id, then earlier box). Cells outside every box are background (0).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};

/// One object annotation in normalized corner coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: usize,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    #[serde(default)]
    pub difficult: bool,
}

impl BoundingBox {
    pub fn new(class_id: usize, xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BoundingBox {
            class_id,
            xmin,
            ymin,
            xmax,
            ymax,
            difficult: false,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_id == 0 {
            return Err(DesError::Validation("class id 0 is reserved for background".into()));
        }
        let coords = [self.xmin, self.ymin, self.xmax, self.ymax];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(DesError::Validation(format!(
                "coordinates must lie in [0, 1], got {coords:?}"
            )));
        }
        if self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(DesError::Validation(format!(
                "degenerate box ({}, {}, {}, {})",
                self.xmin, self.ymin, self.xmax, self.ymax
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    /// Half-open containment: `xmin ≤ x < xmax`, `ymin ≤ y < ymax`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.xmin <= x && x < self.xmax && self.ymin <= y && y < self.ymax
    }

    /// Mirror image under a horizontal flip of the frame.
    pub fn flipped_horizontally(&self) -> Self {
        BoundingBox {
            xmin: 1.0 - self.xmax,
            xmax: 1.0 - self.xmin,
            ..*self
        }
    }
}

/// Per-cell class labels; row-major `height×width`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SegGrid {
    pub fn background(height: usize, width: usize) -> Self {
        SegGrid {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn get(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.width + w]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Binary PGM (P5) with each label multiplied by `gray_step`.
    pub fn to_pgm(&self, gray_step: u8) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.labels
                .iter()
                .map(|&l| (l.saturating_mul(gray_step as u32)).min(255) as u8),
        );
        out
    }
}

/// Priority order among boxes covering the same cell: smaller area first,
/// then lower class id, then earlier list position.
fn priority(a: (usize, &BoundingBox), b: (usize, &BoundingBox)) -> Ordering {
    a.1.area()
        .total_cmp(&b.1.area())
        .then(a.1.class_id.cmp(&b.1.class_id))
        .then(a.0.cmp(&b.0))
}

pub fn rasterize(boxes: &[BoundingBox], grid_h: usize, grid_w: usize) -> Result<SegGrid> {
    if grid_h == 0 || grid_w == 0 {
        return Err(DesError::InvalidInput(format!(
            "grid extents must be positive, got {grid_h}×{grid_w}"
        )));
    }
    for b in boxes {
        b.validate()?;
    }
    // Paint boxes from lowest to highest priority so the winner lands last.
    let mut order: Vec<(usize, &BoundingBox)> = boxes.iter().enumerate().collect();
    order.sort_by(|&a, &b| priority(b, a));

    let mut grid = SegGrid::background(grid_h, grid_w);
    for (_, b) in order {
        // Cell centers inside the box: (i + 0.5)/n ∈ [min, max).
        let rows = cell_range(b.ymin, b.ymax, grid_h);
        let cols = cell_range(b.xmin, b.xmax, grid_w);
        for h in rows {
            let cy = (h as f64 + 0.5) / grid_h as f64;
            for w in cols.clone() {
                let cx = (w as f64 + 0.5) / grid_w as f64;
                if b.contains(cx, cy) {
                    grid.labels[h * grid_w + w] = b.class_id as u32;
                }
            }
        }
    }
    Ok(grid)
}

/// Candidate cell indices whose centers may fall in `[lo, hi)`; the exact
/// membership test is applied by the caller.
fn cell_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let first = ((lo * n as f64 - 0.5).floor().max(0.0)) as usize;
    let last = ((hi * n as f64 - 0.5).ceil().max(0.0) as usize + 1).min(n);
    first.min(n)..last
}

/// Feature-map extent for an input extent at the given stride (ceiling).
pub fn grid_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

pub fn grid_resolution_for(input: (usize, usize), stride: usize) -> (usize, usize) {
    (grid_extent(input.0, stride), grid_extent(input.1, stride))
}
