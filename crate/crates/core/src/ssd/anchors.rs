use serde::{Deserialize, Serialize};

use super::boxes::CornerBox;
use crate::raster::grid_extent;

/// Prior box in normalized center-size coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub source_layer: usize,
    pub scale: f64,
    pub aspect_ratio: f64,
}

impl AnchorBox {
    pub fn to_corner(&self) -> CornerBox {
        CornerBox::new(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    pub scale: f64,
    pub aspect_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLayerSpec {
    pub stride: usize,
    pub channels: usize,
    /// One anchor per shape at every cell, in this order.
    pub shapes: Vec<AnchorShape>,
}

impl SourceLayerSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.shapes.len()
    }
}

/// Default SSD anchor shapes for `layers` source maps with scales linearly
/// spaced over `[scale_min, scale_max]`. Every layer gets aspects 1, 2, 1/2
/// and an extra aspect-1 anchor at `sqrt(s_k·s_{k+1})`; all but the first
/// layer also get aspects 3 and 1/3.
pub fn ssd_anchor_shapes(layers: usize, scale_min: f64, scale_max: f64) -> Vec<Vec<AnchorShape>> {
    let step = if layers > 1 {
        (scale_max - scale_min) / (layers - 1) as f64
    } else {
        0.0
    };
    (0..layers)
        .map(|k| {
            let s = scale_min + step * k as f64;
            let next = if layers > 1 { s + step } else { 1.0 };
            let mut shapes = vec![
                AnchorShape {
                    scale: s,
                    aspect_ratio: 1.0,
                },
                AnchorShape {
                    scale: (s * next).sqrt(),
                    aspect_ratio: 1.0,
                },
            ];
            let aspects: &[f64] = if k == 0 { &[2.0] } else { &[2.0, 3.0] };
            for &a in aspects {
                shapes.push(AnchorShape { scale: s, aspect_ratio: a });
                shapes.push(AnchorShape {
                    scale: s,
                    aspect_ratio: 1.0 / a,
                });
            }
            shapes
        })
        .collect()
}

/// Tiles every source map: row-major over cells, shapes innermost. A shape
/// of scale `s` and aspect `a` gives `w = s·√a`, `h = s/√a`.
pub fn gen_anchors(specs: &[SourceLayerSpec], input_size: usize) -> Vec<AnchorBox> {
    let mut anchors = Vec::new();
    for (layer, spec) in specs.iter().enumerate() {
        let n = grid_extent(input_size, spec.stride);
        for row in 0..n {
            for col in 0..n {
                let cx = (col as f64 + 0.5) / n as f64;
                let cy = (row as f64 + 0.5) / n as f64;
                for shape in &spec.shapes {
                    let r = shape.aspect_ratio.sqrt();
                    anchors.push(AnchorBox {
                        cx,
                        cy,
                        w: shape.scale * r,
                        h: shape.scale / r,
                        source_layer: layer,
                        scale: shape.scale,
                        aspect_ratio: shape.aspect_ratio,
                    });
                }
            }
        }
    }
    anchors
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_specs() -> Vec<SourceLayerSpec> {
        ssd_anchor_shapes(3, 0.15, 0.75)
            .into_iter()
            .zip([8, 16, 32])
            .map(|(shapes, stride)| SourceLayerSpec {
                stride,
                channels: 64,
                shapes,
            })
            .collect()
    }

    #[test]
    fn single_anchor() {
        let spec = SourceLayerSpec {
            stride: 1,
            channels: 4,
            shapes: vec![AnchorShape {
                scale: 0.5,
                aspect_ratio: 1.0,
            }],
        };
        let a = gen_anchors(&[spec], 1);
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].cx, a[0].cy, a[0].w, a[0].h), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn aspect_preserves_area() {
        let spec = SourceLayerSpec {
            stride: 1,
            channels: 4,
            shapes: vec![AnchorShape {
                scale: 0.3,
                aspect_ratio: 2.0,
            }],
        };
        let a = gen_anchors(&[spec], 1)[0];
        assert!((a.w - 0.3 * 2f64.sqrt()).abs() < 1e-15);
        assert!((a.h - 0.3 / 2f64.sqrt()).abs() < 1e-15);
        assert!((a.w * a.h - 0.09).abs() < 1e-15);
    }

    #[test]
    fn toy_count() {
        let specs = toy_specs();
        assert_eq!(specs.iter().map(|s| s.anchors_per_cell()).collect::<Vec<_>>(), vec![4, 6, 6]);
        assert_eq!(gen_anchors(&specs, 64).len(), 8 * 8 * 4 + 4 * 4 * 6 + 2 * 2 * 6);
        assert_eq!(gen_anchors(&specs, 64).len(), 376);
    }

    #[test]
    fn toy_scales() {
        let shapes = ssd_anchor_shapes(3, 0.15, 0.75);
        let scales: Vec<f64> = shapes.iter().map(|s| s[0].scale).collect();
        for (s, e) in scales.iter().zip([0.15, 0.45, 0.75]) {
            assert!((s - e).abs() < 1e-12);
        }
        assert!((shapes[0][1].scale - (0.15f64 * 0.45).sqrt()).abs() < 1e-12);
        assert!((shapes[2][1].scale - (0.75f64 * 1.05).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matches_independent_enumeration() {
        let specs = toy_specs();
        let anchors = gen_anchors(&specs, 64);
        // Enumerate by (layer, shape, cell), then sort into generation order.
        let mut expected = Vec::new();
        for (l, spec) in specs.iter().enumerate() {
            let n = 64 / spec.stride;
            for (k, shape) in spec.shapes.iter().enumerate() {
                for cell in 0..n * n {
                    let (row, col) = (cell / n, cell % n);
                    let key = (l, cell, k);
                    let w = shape.scale * shape.aspect_ratio.sqrt();
                    let h = shape.scale / shape.aspect_ratio.sqrt();
                    expected.push((key, [(col as f64 + 0.5) / n as f64, (row as f64 + 0.5) / n as f64, w, h]));
                }
            }
        }
        expected.sort_by_key(|(k, _)| *k);
        assert_eq!(expected.len(), anchors.len());
        for ((_, e), a) in expected.iter().zip(&anchors) {
            assert_eq!([a.cx, a.cy, a.w, a.h], *e);
            assert!(a.w > 0.0 && a.h > 0.0);
            assert!((0.0..=1.0).contains(&a.cx) && (0.0..=1.0).contains(&a.cy));
        }
    }
}
