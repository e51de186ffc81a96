//! Dataset IO, descriptors, synthetic conflicting-taxonomy data and sampling.

mod coco;
mod sampler;
mod synth;

pub use coco::{load_coco_format, CocoAnnotation, CocoCategory, CocoDataset, CocoFile, CocoImage};
pub use sampler::{
    category_repeat_factors, make_sampler_plan, repeat_factor_weights, SamplerConfig, SamplerPlan,
    SamplerSource, ScheduleEntry,
};
pub use synth::{
    synth_conflict_datasets, write_synth_dataset, ShapeKind, SynthDataset, SynthDatasetSpec,
    SynthSpec,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::boxes::Xyxy;
use crate::error::{Error, Result};
use crate::taxonomy::{
    build_prompt, tokenize_prompt, CategoryVocabulary, DatasetEmbedding, DetectionPrompt,
    LanguageEmbedder,
};

/// Ground truth of one image: pixel xyxy boxes and vocabulary indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<Xyxy>,
    pub labels: Vec<usize>,
    pub dataset_name: String,
}

impl AnnotationRecord {
    /// Boxes divided by the image size.
    pub fn normalized_boxes(&self) -> Vec<Xyxy> {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        self.boxes
            .iter()
            .map(|b| [b[0] / w, b[1] / h, b[2] / w, b[3] / h])
            .collect()
    }
}

/// Fraction of images containing each category (`f_c`).
pub fn category_frequencies(category_count: usize, records: &[AnnotationRecord]) -> Vec<f64> {
    let mut counts = vec![0usize; category_count];
    for rec in records {
        let mut present: Vec<usize> = rec.labels.clone();
        present.sort_unstable();
        present.dedup();
        for l in present {
            if let Some(c) = counts.get_mut(l) {
                *c += 1;
            }
        }
    }
    let n = records.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Everything the model needs to know about one dataset's label space.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDescriptor {
    pub name: String,
    pub vocabulary: CategoryVocabulary,
    pub prompt: DetectionPrompt,
    pub embedding: DatasetEmbedding,
    pub size: usize,
    pub category_frequencies: Vec<f64>,
}

impl DatasetDescriptor {
    /// Builds the prompt and its frozen embedding. Categories that do not fit in
    /// `max_length` are logged and left without tokens.
    pub fn build(
        vocabulary: CategoryVocabulary,
        records: &[AnnotationRecord],
        max_length: usize,
        embedder: &dyn LanguageEmbedder,
    ) -> Result<Self> {
        let prompt = tokenize_prompt(&build_prompt(&vocabulary)?, max_length)?;
        for &c in &prompt.truncated_categories {
            log::warn!(
                "dataset `{}`: category `{}` truncated from the prompt",
                vocabulary.dataset_name,
                vocabulary.categories()[c]
            );
        }
        let embedding = embedder.embed(&prompt)?;
        Ok(Self {
            name: vocabulary.dataset_name.clone(),
            category_frequencies: category_frequencies(vocabulary.category_count(), records),
            size: records.len(),
            vocabulary,
            prompt,
            embedding,
        })
    }

    /// JSON summary stored in checkpoint manifests.
    pub fn summary(&self) -> DescriptorSummary {
        DescriptorSummary {
            name: self.name.clone(),
            categories: self.vocabulary.categories().to_vec(),
            prompt_hash: self.prompt.content_hash(),
            embedding_hash: self.embedding.content_hash(),
            size: self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSummary {
    pub name: String,
    pub categories: Vec<String>,
    pub prompt_hash: String,
    pub embedding_hash: String,
    pub size: usize,
}

/// Mean and spread used to normalize pixel values.
const PIXEL_MEAN: f32 = 0.45;
const PIXEL_STD: f32 = 0.25;

/// Resizes to `size x size` and returns normalized CHW values.
pub fn image_to_chw(img: &RgbImage, size: u32) -> Vec<f32> {
    let resized;
    let img = if img.width() == size && img.height() == size {
        img
    } else {
        resized = image::imageops::resize(img, size, size, FilterType::Triangle);
        &resized
    };
    let plane = (size * size) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (f32::from(px[c]) / 255.0 - PIXEL_MEAN) / PIXEL_STD;
        }
    }
    out
}

/// A dataset held in memory with images already resized for the model.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub root: PathBuf,
    pub vocabulary: CategoryVocabulary,
    pub records: Vec<AnnotationRecord>,
    /// Normalized CHW pixels per record, `image_size` square.
    pub pixels: Vec<Vec<f32>>,
    pub image_size: u32,
    index: BTreeMap<u64, usize>,
}

impl LoadedDataset {
    pub fn new(
        name: &str,
        root: PathBuf,
        vocabulary: CategoryVocabulary,
        records: Vec<AnnotationRecord>,
        images: &[RgbImage],
        image_size: u32,
    ) -> Result<Self> {
        if images.len() != records.len() {
            return Err(Error::data(format!(
                "dataset `{name}`: {} images for {} records",
                images.len(),
                records.len()
            )));
        }
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id, i))
            .collect();
        Ok(Self {
            name: name.to_string(),
            root,
            vocabulary,
            pixels: images.iter().map(|im| image_to_chw(im, image_size)).collect(),
            records,
            image_size,
            index,
        })
    }

    /// Reads `<root>/annotations.json` and `<root>/images/*`.
    pub fn load(name: &str, root: &Path, image_size: u32) -> Result<Self> {
        let coco = load_coco_format(&root.join("annotations.json"), Some(name))?;
        let images = coco
            .records
            .iter()
            .map(|r| {
                let p = root.join("images").join(&r.file_name);
                image::open(&p)
                    .map(|im| im.to_rgb8())
                    .map_err(|e| Error::data(format!("cannot read image {}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, root.to_path_buf(), coco.vocabulary, coco.records, &images, image_size)
    }

    pub fn from_synth(ds: &SynthDataset, image_size: u32) -> Result<Self> {
        Self::new(
            &ds.vocabulary.dataset_name,
            PathBuf::new(),
            ds.vocabulary.clone(),
            ds.records.clone(),
            &ds.images,
            image_size,
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, image_id: u64) -> Option<usize> {
        self.index.get(&image_id).copied()
    }

    /// Keeps the records at the given positions, in order.
    pub fn subset(&self, positions: &[usize]) -> Self {
        let records: Vec<_> = positions.iter().map(|&i| self.records[i].clone()).collect();
        Self {
            name: self.name.clone(),
            root: self.root.clone(),
            vocabulary: self.vocabulary.clone(),
            pixels: positions.iter().map(|&i| self.pixels[i].clone()).collect(),
            index: records.iter().enumerate().map(|(i, r)| (r.image_id, i)).collect(),
            records,
            image_size: self.image_size,
        }
    }

    pub fn category_frequencies(&self) -> Vec<f64> {
        category_frequencies(self.vocabulary.category_count(), &self.records)
    }
}
