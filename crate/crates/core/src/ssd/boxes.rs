use serde::{Deserialize, Serialize};

use super::anchors::AnchorBox;
use crate::raster::BoundingBox;

/// Center and size variances of the offset encoding.
pub const VARIANCES: [f64; 2] = [0.1, 0.2];

/// Axis-aligned box in normalized corner coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl CornerBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        CornerBox { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.ymax - self.ymin).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn clipped(&self) -> Self {
        CornerBox {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }
}

impl From<&BoundingBox> for CornerBox {
    fn from(b: &BoundingBox) -> Self {
        CornerBox::new(b.xmin, b.ymin, b.xmax, b.ymax)
    }
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Center-size offsets of `gt` relative to `anchor`, scaled by the variances.
pub fn encode(gt: &CornerBox, anchor: &AnchorBox) -> [f64; 4] {
    let gcx = 0.5 * (gt.xmin + gt.xmax);
    let gcy = 0.5 * (gt.ymin + gt.ymax);
    [
        (gcx - anchor.cx) / (VARIANCES[0] * anchor.w),
        (gcy - anchor.cy) / (VARIANCES[0] * anchor.h),
        (gt.width() / anchor.w).ln() / VARIANCES[1],
        (gt.height() / anchor.h).ln() / VARIANCES[1],
    ]
}

pub fn decode(offsets: &[f64], anchor: &AnchorBox) -> CornerBox {
    let cx = anchor.cx + offsets[0] * VARIANCES[0] * anchor.w;
    let cy = anchor.cy + offsets[1] * VARIANCES[0] * anchor.h;
    let w = anchor.w * (offsets[2] * VARIANCES[1]).exp();
    let h = anchor.h * (offsets[3] * VARIANCES[1]).exp();
    CornerBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Area estimate by sampling a fine lattice.
    fn pixel_iou(a: &CornerBox, b: &CornerBox, lo: f64, hi: f64, n: usize) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        let step = (hi - lo) / n as f64;
        for i in 0..n {
            for j in 0..n {
                let x = lo + (i as f64 + 0.5) * step;
                let y = lo + (j as f64 + 0.5) * step;
                let ina = a.xmin <= x && x < a.xmax && a.ymin <= y && y < a.ymax;
                let inb = b.xmin <= x && x < b.xmax && b.ymin <= y && y < b.ymax;
                inter += (ina && inb) as usize;
                union += (ina || inb) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_cases() {
        let a = CornerBox::new(0.0, 0.0, 1.0, 1.0);
        let b = CornerBox::new(0.5, 0.0, 1.5, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &CornerBox::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert!((pixel_iou(&a, &b, 0.0, 1.5, 600) - 1.0 / 3.0).abs() < 1e-3);
        assert_eq!(iou(&a, &CornerBox::new(0.5, 0.5, 0.5, 0.9)), 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let anchor = AnchorBox {
                cx: rng.gen_range(0.0..1.0),
                cy: rng.gen_range(0.0..1.0),
                w: rng.gen_range(0.05..1.0),
                h: rng.gen_range(0.05..1.0),
                source_layer: 0,
                scale: 0.3,
                aspect_ratio: 1.0,
            };
            let x0: f64 = rng.gen_range(0.0..0.9);
            let y0: f64 = rng.gen_range(0.0..0.9);
            let gt = CornerBox::new(x0, y0, x0 + rng.gen_range(0.01..0.5), y0 + rng.gen_range(0.01..0.5));
            let back = decode(&encode(&gt, &anchor), &anchor);
            for (p, q) in [(back.xmin, gt.xmin), (back.ymin, gt.ymin), (back.xmax, gt.xmax), (back.ymax, gt.ymax)] {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matching_anchor_has_zero_offsets() {
        let anchor = AnchorBox {
            cx: 0.4,
            cy: 0.6,
            w: 0.2,
            h: 0.3,
            source_layer: 0,
            scale: 0.2,
            aspect_ratio: 1.0,
        };
        let gt = anchor.to_corner();
        for v in encode(&gt, &anchor) {
            assert!(v.abs() < 1e-12);
        }
    }
}
