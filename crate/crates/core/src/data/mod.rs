//! Samples, datasets, and their on-disk formats.

pub mod manifest;
pub mod pnm;
pub mod synthetic;
pub mod voc;

use crate::error::Result;
use crate::raster::{rasterize, BoundingBox, SegGrid};
use crate::tensor::Tensor;

pub use manifest::{load_manifest, write_dataset, DatasetManifest};
pub use pnm::{read_ppm, write_ppm};
pub use synthetic::{gen_synthetic, synthetic_class_names};
pub use voc::{parse_voc_xml, VocAnnotation};

/// One annotated image. `seg_grid` is derived from `boxes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<BoundingBox>,
    pub seg_grid: SegGrid,
}

impl Sample {
    pub fn new(image: Tensor, boxes: Vec<BoundingBox>, grid: usize) -> Result<Self> {
        let seg_grid = rasterize(&boxes, grid, grid)?;
        Ok(Sample { image, boxes, seg_grid })
    }

    /// Left-right mirror of image, boxes and grid.
    pub fn flipped(&self) -> Result<Self> {
        let boxes: Vec<BoundingBox> = self.boxes.iter().map(BoundingBox::flipped_horizontally).collect();
        let seg_grid = rasterize(&boxes, self.seg_grid.height, self.seg_grid.width)?;
        Ok(Sample {
            image: pnm::flip_horizontal(&self.image)?,
            boxes,
            seg_grid,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Index 0 is background.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn synthetic(seed: u64, count: usize, classes: usize, size: usize, grid: usize) -> Result<Self> {
        Ok(Dataset {
            class_names: synthetic_class_names(classes),
            samples: gen_synthetic(seed, count, classes, size, grid)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_keeps_grid_consistent() {
        let s = Sample::new(
            Tensor::zeros([3, 16, 16]),
            vec![BoundingBox::new(2, 0.0, 0.25, 0.3, 0.75).unwrap()],
            4,
        )
        .unwrap();
        let f = s.flipped().unwrap();
        assert_eq!(f.seg_grid, rasterize(&f.boxes, 4, 4).unwrap());
        assert_eq!(f.seg_grid.get(1, 3), 2);
        assert_eq!(f.seg_grid.get(1, 0), 0);
        assert!((f.flipped().unwrap().boxes[0].xmax - 0.3).abs() < 1e-15);
    }
}
