use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnnotationRecord;
use crate::boxes::{clip_to, xywh_to_xyxy, xyxy_to_xywh};
use crate::error::{Error, Result};
use crate::taxonomy::CategoryVocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// The subset of the COCO detection format this crate reads and writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Parsed COCO dataset: vocabulary (ascending category id), one record per image.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub vocabulary: CategoryVocabulary,
    pub records: Vec<AnnotationRecord>,
}

impl CocoFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        for key in ["images", "annotations", "categories"] {
            if value.get(key).map_or(true, |v| !v.is_array()) {
                return Err(Error::data(format!("COCO file lacks a `{key}` array")));
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Converts to records. Crowd annotations are dropped, boxes become xyxy
    /// clipped to the image.
    pub fn into_dataset(self, dataset_name: &str) -> Result<CocoDataset> {
        let mut cats = self.categories;
        cats.sort_by_key(|c| c.id);
        if cats.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::data(format!("duplicate category id in `{dataset_name}`")));
        }
        let index: HashMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        let vocabulary =
            CategoryVocabulary::new(dataset_name, cats.iter().map(|c| c.name.clone()).collect())?;

        let mut records: BTreeMap<u64, AnnotationRecord> = BTreeMap::new();
        for img in &self.images {
            if records.contains_key(&img.id) {
                return Err(Error::data(format!("duplicate image id {}", img.id)));
            }
            records.insert(
                img.id,
                AnnotationRecord {
                    image_id: img.id,
                    file_name: img.file_name.clone(),
                    width: img.width,
                    height: img.height,
                    boxes: Vec::new(),
                    labels: Vec::new(),
                    dataset_name: dataset_name.to_string(),
                },
            );
        }
        for ann in &self.annotations {
            let label = *index.get(&ann.category_id).ok_or_else(|| {
                Error::data(format!(
                    "annotation {} references unknown category_id {}",
                    ann.id, ann.category_id
                ))
            })?;
            let rec = records.get_mut(&ann.image_id).ok_or_else(|| {
                Error::data(format!(
                    "annotation {} references unknown image_id {}",
                    ann.id, ann.image_id
                ))
            })?;
            if ann.iscrowd != 0 {
                continue;
            }
            if ann.bbox.iter().any(|v| !v.is_finite()) || ann.bbox[2] <= 0.0 || ann.bbox[3] <= 0.0 {
                return Err(Error::data(format!("annotation {} has a malformed bbox", ann.id)));
            }
            let b = clip_to(
                xywh_to_xyxy(ann.bbox),
                f64::from(rec.width),
                f64::from(rec.height),
            );
            rec.boxes.push(b);
            rec.labels.push(label);
        }
        Ok(CocoDataset {
            vocabulary,
            records: records.into_values().collect(),
        })
    }

    /// Builds a COCO file from records; category ids are `index + 1`.
    pub fn from_records(vocab: &CategoryVocabulary, records: &[AnnotationRecord]) -> Self {
        let mut annotations = Vec::new();
        for rec in records {
            for (b, &l) in rec.boxes.iter().zip(&rec.labels) {
                let bbox = xyxy_to_xywh(*b);
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: rec.image_id,
                    category_id: l as u64 + 1,
                    bbox,
                    area: bbox[2] * bbox[3],
                    iscrowd: 0,
                });
            }
        }
        Self {
            images: records
                .iter()
                .map(|r| CocoImage {
                    id: r.image_id,
                    file_name: r.file_name.clone(),
                    width: r.width,
                    height: r.height,
                })
                .collect(),
            annotations,
            categories: vocab
                .categories()
                .iter()
                .enumerate()
                .map(|(i, name)| CocoCategory {
                    id: i as u64 + 1,
                    name: name.clone(),
                })
                .collect(),
        }
    }
}

/// Reads a COCO-format JSON file. The dataset is named after the file stem
/// unless `dataset_name` is given.
pub fn load_coco_format(path: &Path, dataset_name: Option<&str>) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = dataset_name.map(str::to_string).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    CocoFile::from_json(&text)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .into_dataset(&name)
}
