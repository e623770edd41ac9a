//! Deterministic synthetic shapes: 1–4 solid shapes per image on a textured
//! background, one class per shape kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{DesError, Result};
use crate::raster::BoundingBox;
use crate::tensor::Tensor;

/// Shape kinds in class order (class id = index + 1).
pub const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

const MAX_SHAPES: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Placed {
    kind: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Placed {
    /// Membership of the point `(px, py)` in pixel units.
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy, r) = (px - self.cx, py - self.cy, self.r);
        match self.kind {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r && dy.abs() <= r,
            2 => {
                // Upward isosceles triangle inscribed in the square of half-side r.
                if dy < -r || dy > r {
                    return false;
                }
                let half_width = r * (dy + r) / (2.0 * r);
                dx.abs() <= half_width
            }
            3 => dx.abs() + dy.abs() <= r,
            4 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
            _ => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
        }
    }

    /// Pixel mask over a `size×size` image, sampled at pixel centers.
    fn mask(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                m[y * size + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        m
    }
}

/// Smallest box of whole pixels covering the mask, in normalized units.
fn tight_box(mask: &[bool], size: usize, class_id: usize) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let s = size as f64;
    BoundingBox::new(class_id, x0 as f64 / s, y0 as f64 / s, (x1 + 1) as f64 / s, (y1 + 1) as f64 / s).ok()
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> (Vec<f64>, [f64; 3]) {
    let base: [f64; 3] = [(); 3].map(|_| rng.gen_range(0.15..0.85));
    let fx = rng.gen_range(0.2..0.9);
    let fy = rng.gen_range(0.2..0.9);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let stripe = 0.08 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..3 {
                let noise = rng.gen_range(-0.05..0.05);
                data[c * plane + y * size + x] = (base[c] + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    (data, base)
}

/// A fill color whose mean channel distance from `bg` is at least 0.3.
fn contrasting_color(rng: &mut ChaCha8Rng, bg: &[f64; 3]) -> [f64; 3] {
    loop {
        let c: [f64; 3] = [(); 3].map(|_| rng.gen_range(0.0..1.0));
        let dist: f64 = c.iter().zip(bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if dist >= 0.3 {
            return c;
        }
    }
}

/// Scene with the pixel mask of each shape, in box order.
pub(crate) struct Scene {
    pub sample: Sample,
    #[cfg_attr(not(test), allow(dead_code))]
    pub masks: Vec<Vec<bool>>,
}

pub(crate) fn gen_scene(rng: &mut ChaCha8Rng, index: usize, classes: usize, size: usize, grid: usize) -> Result<Scene> {
    let (mut data, bg) = background(rng, size);
    let plane = size * size;
    let s = size as f64;
    let want = rng.gen_range(1..=MAX_SHAPES);
    let (r_lo, r_hi) = (0.08 * s, 0.24 * s);

    let mut placed: Vec<Placed> = Vec::new();
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    let mut attempts = 0;
    while placed.len() < want && attempts < 200 {
        attempts += 1;
        // The first shape cycles through the classes so every class is
        // represented once per `classes` consecutive images.
        let kind = if placed.is_empty() {
            index % classes
        } else {
            rng.gen_range(0..classes)
        };
        let r = rng.gen_range(r_lo..r_hi);
        let cx = rng.gen_range(r + 1.0..s - r - 1.0);
        let cy = rng.gen_range(r + 1.0..s - r - 1.0);
        let clear = placed
            .iter()
            .all(|p| (p.cx - cx).abs() > p.r + r + 2.0 || (p.cy - cy).abs() > p.r + r + 2.0);
        if !clear {
            continue;
        }
        let shape = Placed { kind, cx, cy, r };
        let mask = shape.mask(size);
        let Some(b) = tight_box(&mask, size, kind + 1) else {
            continue;
        };
        let color = contrasting_color(rng, &bg);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..3 {
                    data[c * plane + i] = color[c];
                }
            }
        }
        placed.push(shape);
        boxes.push(b);
        masks.push(mask);
    }
    let image = Tensor::new([3, size, size], data)?;
    Ok(Scene {
        sample: Sample::new(image, boxes, grid)?,
        masks,
    })
}

/// `count` images of `size×size` pixels with `classes` shape kinds. The
/// weak segmentation grid of each sample has `grid` cells per side.
pub fn gen_synthetic(seed: u64, count: usize, classes: usize, size: usize, grid: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(DesError::InvalidInput("synthetic dataset needs count > 0".into()));
    }
    if classes == 0 || classes > SHAPE_NAMES.len() {
        return Err(DesError::InvalidInput(format!(
            "synthetic dataset supports 1..={} classes, got {classes}",
            SHAPE_NAMES.len()
        )));
    }
    if size < 16 {
        return Err(DesError::InvalidInput(format!("image size {size} is below 16 pixels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gen_scene(&mut rng, i, classes, size, grid).map(|s| s.sample))
        .collect()
}

pub fn synthetic_class_names(classes: usize) -> Vec<String> {
    std::iter::once("background")
        .chain(SHAPE_NAMES.iter().copied().take(classes))
        .map(String::from)
        .collect()
}
