//! Labelled image folders.
//!
//! ```text
//! <root>/classes.json   ["class name", ...]          (index = label)
//! <root>/labels.csv     image_id,file,label,x0,y0,x1,y1
//! <root>/images/...     rasters referenced by `file`
//! ```
//!
//! Box columns are optional and are used for CorLoc.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn intersection(&self, other: &PixelBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    /// Path relative to the dataset root.
    pub file: String,
    pub label: usize,
    pub gt_box: Option<PixelBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    image_id: String,
    file: String,
    label: usize,
    x0: Option<f64>,
    y0: Option<f64>,
    x1: Option<f64>,
    y1: Option<f64>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let classes_path = root.join("classes.json");
        let classes: Vec<String> =
            serde_json::from_slice(&fs::read(&classes_path).map_err(Error::at(&classes_path))?)?;
        let labels_path = root.join("labels.csv");
        let mut reader = csv::Reader::from_path(&labels_path)?;
        let mut items = Vec::new();
        for row in reader.deserialize() {
            let row: LabelRow = row?;
            if row.label >= classes.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: label {} out of range for {} classes",
                    row.image_id,
                    row.label,
                    classes.len()
                )));
            }
            let gt_box = match (row.x0, row.y0, row.x1, row.y1) {
                (Some(x0), Some(y0), Some(x1), Some(y1)) => Some(PixelBox { x0, y0, x1, y1 }),
                _ => None,
            };
            items.push(DatasetItem {
                id: row.image_id,
                file: row.file,
                label: row.label,
                gt_box,
            });
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            items,
        })
    }

    pub fn save_metadata(&self) -> Result<()> {
        crate::report::write_atomic(
            &self.root.join("classes.json"),
            &serde_json::to_vec_pretty(&self.classes)?,
        )?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for item in &self.items {
            w.serialize(LabelRow {
                image_id: item.id.clone(),
                file: item.file.clone(),
                label: item.label,
                x0: item.gt_box.map(|b| b.x0),
                y0: item.gt_box.map(|b| b.y0),
                x1: item.gt_box.map(|b| b.x1),
                y1: item.gt_box.map(|b| b.y1),
            })?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        crate::report::write_atomic(&self.root.join("labels.csv"), &bytes)
    }

    pub fn load_image(&self, item: &DatasetItem) -> Result<RgbImage> {
        let path = self.root.join(&item.file);
        Ok(image::open(&path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::Path { path: path.clone(), source: io },
                other => Error::Image(other),
            })?
            .to_rgb8())
    }

    pub fn item(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Items of one class, in file order.
    pub fn class_items(&self, label: usize) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.label == label).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_offset_squares() {
        let a = PixelBox { x0: 0.0, y0: 0.0, x1: 10.0, y1: 10.0 };
        let b = PixelBox { x0: 5.0, y0: 5.0, x1: 15.0, y1: 15.0 };
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        let c = PixelBox { x0: 20.0, y0: 20.0, x1: 30.0, y1: 30.0 };
        assert_eq!(a.iou(&c), 0.0);
    }
}
