//! COCO-style dataset manifest.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::supervision::InstanceAnnotation;

use super::rle::{rle_encode, RleMask};
use super::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    pub segmentation: RleMask,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub area: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

/// An image that received fewer instances than requested because placement
/// kept failing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementShortfall {
    pub image_id: u64,
    pub requested: usize,
    pub placed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shortfalls: Vec<PlacementShortfall>,
}

impl AnnotationRecord {
    pub fn from_instance(id: u64, image_id: u64, inst: &InstanceAnnotation) -> Self {
        let b = inst.bbox;
        Self {
            id,
            image_id,
            category_id: inst.class_id,
            segmentation: rle_encode(&inst.mask),
            bbox: [b.x, b.y, b.w, b.h],
            area: inst.area as u64,
        }
    }

    pub fn to_instance(&self) -> Result<InstanceAnnotation> {
        let mask = self.segmentation.decode()?;
        let [x, y, w, h] = self.bbox;
        Ok(InstanceAnnotation {
            class_id: self.category_id,
            area: mask.area(),
            mask,
            bbox: BBox::new(x, y, w, h),
        })
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn num_classes(&self) -> usize {
        self.categories.iter().map(|c| c.id).max().unwrap_or(0)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Decoded annotations of one image, in manifest order.
    pub fn instances(&self, image_id: u64) -> Result<Vec<InstanceAnnotation>> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(AnnotationRecord::to_instance)
            .collect()
    }

    /// Referential integrity plus per-annotation consistency: unique ids,
    /// known image and category, RLE sized to its image, recorded area equal
    /// to the decoded pixel count.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        let mut sizes = HashMap::new();
        for im in &self.images {
            if sizes.insert(im.id, (im.height, im.width)).is_some() {
                return bad(format!("duplicate image id {}", im.id));
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if c.id == 0 {
                return bad(format!("category {:?} uses reserved id 0", c.name));
            }
            if !cats.insert(c.id) {
                return bad(format!("duplicate category id {}", c.id));
            }
        }
        let mut ids = HashSet::new();
        for a in &self.annotations {
            if !ids.insert(a.id) {
                return bad(format!("duplicate annotation id {}", a.id));
            }
            let Some(&(h, w)) = sizes.get(&a.image_id) else {
                return bad(format!("annotation {} refers to missing image {}", a.id, a.image_id));
            };
            if !cats.contains(&a.category_id) {
                return bad(format!("annotation {} has unknown category {}", a.id, a.category_id));
            }
            if a.segmentation.size != [h, w] {
                return bad(format!(
                    "annotation {} mask is {:?}, image is {:?}",
                    a.id,
                    a.segmentation.size,
                    [h, w]
                ));
            }
            let total: u64 = a.segmentation.counts.iter().sum();
            if total != (h * w) as u64 {
                return Err(Error::RleCounts {
                    expected: h * w,
                    actual: total as usize,
                });
            }
            if a.segmentation.area() != a.area {
                return bad(format!(
                    "annotation {} area {} but mask has {} pixels",
                    a.id,
                    a.area,
                    a.segmentation.area()
                ));
            }
        }
        Ok(())
    }
}
