//! JSON dataset manifests: a class table plus (image, annotation) pairs.
//!
//! Paths are resolved relative to the manifest's directory. Annotations are
//! VOC XML (`.xml`) or JSON `{"boxes": [{"class", "xmin", ...}]}` with
//! normalized coordinates, where `class` is a name or a class id.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{read_ppm, resize_bilinear, write_ppm};
use super::voc::parse_voc_xml;
use super::{Dataset, Sample};
use crate::error::{DesError, Result};
use crate::raster::BoundingBox;

pub const BACKGROUND: &str = "background";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Id(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonBox {
    pub class: ClassRef,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonAnnotation {
    pub boxes: Vec<JsonBox>,
}

impl DatasetManifest {
    /// Class table with background at index 0, prepended when absent.
    pub fn class_table(&self) -> Vec<String> {
        if self.classes.first().map(String::as_str) == Some(BACKGROUND) {
            self.classes.clone()
        } else {
            std::iter::once(BACKGROUND.to_string()).chain(self.classes.iter().cloned()).collect()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_table().len() - 1
    }
}

fn resolve_class(c: &ClassRef, table: &[String]) -> Result<usize> {
    match c {
        ClassRef::Id(id) if (1..table.len()).contains(id) => Ok(*id),
        ClassRef::Id(id) => Err(DesError::UnknownClass(format!("#{id}"))),
        ClassRef::Name(n) => table
            .iter()
            .skip(1)
            .position(|t| t == n)
            .map(|i| i + 1)
            .ok_or_else(|| DesError::UnknownClass(n.clone())),
    }
}

pub fn parse_json_annotation(text: &str, table: &[String]) -> Result<Vec<BoundingBox>> {
    let ann: JsonAnnotation = serde_json::from_str(text)?;
    ann.boxes
        .iter()
        .map(|b| {
            let bb = BoundingBox {
                class_id: resolve_class(&b.class, table)?,
                xmin: b.xmin,
                ymin: b.ymin,
                xmax: b.xmax,
                ymax: b.ymax,
                difficult: b.difficult,
            };
            bb.validate()?;
            Ok(bb)
        })
        .collect()
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        DesError::Io(io) => DesError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        DesError::Validation(m) => DesError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads every sample, resizing images to `input_size` square and building
/// seg grids of `grid` cells per side.
pub fn load_manifest(path: &Path, input_size: usize, grid: usize) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&with_path(path, std::fs::read_to_string(path).map_err(Into::into))?)?;
    let table = manifest.class_table();
    if table.len() < 2 {
        return Err(DesError::Validation(format!("{}: class table lists no object classes", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let img_path = base.join(&entry.image);
        let ann_path = base.join(&entry.annotation);
        let image = with_path(&img_path, read_ppm(&img_path))?;
        let image = resize_bilinear(&image, input_size, input_size)?;
        let boxes = if ann_path.extension().and_then(|e| e.to_str()) == Some("xml") {
            let bytes = with_path(&ann_path, std::fs::read(&ann_path).map_err(Into::into))?;
            with_path(&ann_path, parse_voc_xml(&bytes, &table).map(|a| a.boxes))?
        } else {
            let text = with_path(&ann_path, std::fs::read_to_string(&ann_path).map_err(Into::into))?;
            with_path(&ann_path, parse_json_annotation(&text, &table))?
        };
        samples.push(Sample::new(image, boxes, grid)?);
    }
    Ok(Dataset {
        class_names: table,
        samples,
    })
}

/// Writes `dataset` as PPM images, JSON annotations and a manifest under
/// `dir`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("annotations"))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:05}.ppm"));
        let annotation = PathBuf::from(format!("annotations/{i:05}.json"));
        write_ppm(&s.image, &dir.join(&image))?;
        let ann = JsonAnnotation {
            boxes: s
                .boxes
                .iter()
                .map(|b| JsonBox {
                    class: ClassRef::Name(dataset.class_names[b.class_id].clone()),
                    xmin: b.xmin,
                    ymin: b.ymin,
                    xmax: b.xmax,
                    ymax: b.ymax,
                    difficult: b.difficult,
                })
                .collect(),
        };
        std::fs::write(dir.join(&annotation), serde_json::to_string(&ann)?)?;
        entries.push(ManifestEntry { image, annotation });
    }
    let manifest = DatasetManifest {
        classes: dataset.class_names.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{gen_synthetic, synthetic_class_names};

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset {
            class_names: synthetic_class_names(3),
            samples: gen_synthetic(1, 5, 3, 32, 4).unwrap(),
        };
        let path = write_dataset(&data, dir.path()).unwrap();
        let back = load_manifest(&path, 32, 4).unwrap();
        assert_eq!(back.class_names, data.class_names);
        assert_eq!(back.samples.len(), 5);
        for (a, b) in back.samples.iter().zip(&data.samples) {
            assert_eq!(a.boxes, b.boxes);
            assert!(a.image.sub(&b.image).unwrap().max_abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn class_table_prepends_background() {
        let m = DatasetManifest {
            classes: vec!["cat".into()],
            samples: vec![],
        };
        assert_eq!(m.class_table(), vec!["background", "cat"]);
        assert_eq!(m.num_classes(), 1);
    }

    #[test]
    fn json_annotation_class_refs() {
        let table: Vec<String> = ["background", "a", "b"].iter().map(|s| s.to_string()).collect();
        let text = r#"{"boxes": [{"class": "b", "xmin": 0.1, "ymin": 0.1, "xmax": 0.5, "ymax": 0.5},
                                {"class": 1, "xmin": 0.0, "ymin": 0.0, "xmax": 1.0, "ymax": 1.0, "difficult": true}]}"#;
        let boxes = parse_json_annotation(text, &table).unwrap();
        assert_eq!((boxes[0].class_id, boxes[1].class_id), (2, 1));
        assert!(boxes[1].difficult);
        assert!(parse_json_annotation(r#"{"boxes": [{"class": 3, "xmin": 0, "ymin": 0, "xmax": 1, "ymax": 1}]}"#, &table).is_err());
        assert!(parse_json_annotation(r#"{"boxes": [{"class": "a", "xmin": 0.5, "ymin": 0, "xmax": 0.5, "ymax": 1}]}"#, &table).is_err());
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            classes: vec!["a".into()],
            samples: vec![ManifestEntry {
                image: "nope.ppm".into(),
                annotation: "nope.json".into(),
            }],
        };
        let p = dir.path().join("m.json");
        std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        let e = load_manifest(&p, 32, 4).unwrap_err();
        assert!(e.to_string().contains("nope.ppm"), "{e}");
    }
}
