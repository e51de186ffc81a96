use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::CocoFile;
use super::AnnotationRecord;
use crate::boxes::{iou, Xyxy};
use crate::error::{Error, Result};
use crate::taxonomy::CategoryVocabulary;

/// Attempts per shape before a placement is declared impossible.
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the pixel centre `(px, py)` lies inside the shape drawn in `b`.
    fn contains(&self, b: &Xyxy, px: f64, py: f64) -> bool {
        match self {
            ShapeKind::Square => px >= b[0] && px < b[2] && py >= b[1] && py < b[3],
            ShapeKind::Circle => {
                let cx = 0.5 * (b[0] + b[2]);
                let cy = 0.5 * (b[1] + b[3]);
                let r = 0.5 * (b[2] - b[0]);
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // Apex at the top centre, base along the bottom edge.
                if py < b[1] || py >= b[3] {
                    return false;
                }
                let t = (py - b[1]) / (b[3] - b[1]);
                let half = 0.5 * t * (b[2] - b[0]);
                let cx = 0.5 * (b[0] + b[2]);
                (px - cx).abs() <= half
            }
        }
    }
}

/// One dataset of the synthetic family: which shapes it annotates and under
/// which names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub name: String,
    pub images: usize,
    /// Annotated shapes and their category names, in vocabulary order.
    pub classes: Vec<(ShapeKind, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape side range in pixels.
    pub min_side: f64,
    pub max_side: f64,
    /// Shapes overlapping an earlier one beyond this IoU are re-sampled.
    pub max_overlap_iou: f64,
    /// Amplitude of uniform background noise (0-255 scale).
    pub noise: f64,
    pub datasets: Vec<SynthDatasetSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::with_datasets(2, 200)
    }
}

impl SynthSpec {
    /// `n` datasets with `images` images each. The first two are
    /// A = {circle, square} and B = {triangle, box (a renamed square)}; later
    /// ones rename circles to "ring" and keep triangles, cycling thereafter.
    pub fn with_datasets(n: usize, images: usize) -> Self {
        let patterns: [Vec<(ShapeKind, &str)>; 3] = [
            vec![(ShapeKind::Circle, "circle"), (ShapeKind::Square, "square")],
            vec![(ShapeKind::Triangle, "triangle"), (ShapeKind::Square, "box")],
            vec![(ShapeKind::Circle, "ring"), (ShapeKind::Triangle, "triangle")],
        ];
        let datasets = (0..n)
            .map(|i| SynthDatasetSpec {
                name: dataset_letter(i),
                images,
                classes: patterns[i % 3]
                    .iter()
                    .map(|(k, name)| (*k, name.to_string()))
                    .collect(),
            })
            .collect();
        Self {
            image_size: 128,
            min_shapes: 1,
            max_shapes: 5,
            min_side: 18.0,
            max_side: 40.0,
            max_overlap_iou: 0.3,
            noise: 40.0,
            datasets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("impossible synthetic spec: {m}")));
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!(
                "shape count range [{}, {}] is empty or starts at 0",
                self.min_shapes, self.max_shapes
            ));
        }
        if !(self.min_side >= 2.0 && self.min_side <= self.max_side)
            || self.max_side > f64::from(self.image_size)
        {
            return bad(format!(
                "side range [{}, {}] does not fit a {} px image",
                self.min_side, self.max_side, self.image_size
            ));
        }
        if !(0.0..1.0).contains(&self.max_overlap_iou) {
            return bad("max_overlap_iou must be in [0, 1)".into());
        }
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        let mut names = std::collections::HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return bad(format!("duplicate dataset `{}`", d.name));
            }
            if d.classes.is_empty() || d.images == 0 {
                return bad(format!("dataset `{}` needs classes and images", d.name));
            }
            let mut kinds = std::collections::HashSet::new();
            for (k, _) in &d.classes {
                if !kinds.insert(*k) {
                    return bad(format!("dataset `{}` names {:?} twice", d.name, k));
                }
            }
        }
        Ok(())
    }

    /// Probability that a given shape kind appears in an image: the shape
    /// count is uniform on `[min, max]` and each shape's kind is uniform.
    pub fn expected_presence_rate(&self) -> f64 {
        let k = ShapeKind::ALL.len() as f64;
        let counts = self.min_shapes..=self.max_shapes;
        let n = counts.clone().count() as f64;
        1.0 - counts.map(|c| (1.0 - 1.0 / k).powi(c as i32)).sum::<f64>() / n
    }
}

fn dataset_letter(i: usize) -> String {
    let letter = (b'A' + (i % 26) as u8) as char;
    if i < 26 {
        letter.to_string()
    } else {
        format!("{letter}{}", i / 26)
    }
}

/// A generated dataset with its ground-truth-complete reference labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub vocabulary: CategoryVocabulary,
    pub records: Vec<AnnotationRecord>,
    pub images: Vec<RgbImage>,
    /// Every drawn shape per image, annotated or not.
    pub reference: Vec<Vec<(ShapeKind, Xyxy)>>,
}

/// Renders the dataset family described by `spec`.
///
/// Every image contains shapes of all kinds; each dataset only annotates the
/// kinds listed in its spec, under its own names.
pub fn synth_conflict_datasets(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthDataset>> {
    spec.validate()?;
    spec.datasets
        .iter()
        .enumerate()
        .map(|(di, ds)| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(di as u64 + 1),
            );
            let vocabulary = CategoryVocabulary::new(
                ds.name.clone(),
                ds.classes.iter().map(|(_, n)| n.clone()).collect(),
            )?;
            let label_of: BTreeMap<ShapeKind, usize> =
                ds.classes.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect();
            let mut records = Vec::with_capacity(ds.images);
            let mut images = Vec::with_capacity(ds.images);
            let mut reference = Vec::with_capacity(ds.images);
            for i in 0..ds.images {
                let (img, shapes) = render_image(spec, &mut rng)?;
                let mut rec = AnnotationRecord {
                    image_id: i as u64 + 1,
                    file_name: format!("{:06}.png", i + 1),
                    width: spec.image_size,
                    height: spec.image_size,
                    boxes: Vec::new(),
                    labels: Vec::new(),
                    dataset_name: ds.name.clone(),
                };
                for (kind, b) in &shapes {
                    if let Some(&l) = label_of.get(kind) {
                        rec.boxes.push(*b);
                        rec.labels.push(l);
                    }
                }
                records.push(rec);
                images.push(img);
                reference.push(shapes);
            }
            Ok(SynthDataset {
                vocabulary,
                records,
                images,
                reference,
            })
        })
        .collect()
}

fn render_image(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(RgbImage, Vec<(ShapeKind, Xyxy)>)> {
    let size = spec.image_size;
    let s = f64::from(size);
    let base: f64 = rng.gen_range(20.0..80.0);
    let mut img = RgbImage::from_fn(size, size, |_, _| {
        let mut px = [0u8; 3];
        for c in px.iter_mut() {
            *c = (base + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    });
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes: Vec<(ShapeKind, Xyxy)> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.gen_range(spec.min_side..=spec.max_side).round();
            let x = rng.gen_range(0.0..=(s - side)).round();
            let y = rng.gen_range(0.0..=(s - side)).round();
            let b = [x, y, x + side, y + side];
            if shapes.iter().all(|(_, o)| iou(o, &b) <= spec.max_overlap_iou) {
                placed = Some(b);
                break;
            }
        }
        let b = placed.ok_or_else(|| {
            Error::config(format!(
                "impossible synthetic spec: cannot place {count} shapes with IoU <= {}",
                spec.max_overlap_iou
            ))
        })?;
        let colour = Rgb([
            rng.gen_range(130..=255u8),
            rng.gen_range(130..=255u8),
            rng.gen_range(130..=255u8),
        ]);
        for py in b[1] as u32..(b[3] as u32).min(size) {
            for px in b[0] as u32..(b[2] as u32).min(size) {
                if kind.contains(&b, f64::from(px) + 0.5, f64::from(py) + 0.5) {
                    img.put_pixel(px, py, colour);
                }
            }
        }
        shapes.push((kind, b));
    }
    Ok((img, shapes))
}

#[derive(Serialize, Deserialize)]
struct ReferenceFile {
    images: Vec<ReferenceImage>,
}

#[derive(Serialize, Deserialize)]
struct ReferenceImage {
    image_id: u64,
    shapes: Vec<(ShapeKind, Xyxy)>,
}

/// Writes `annotations.json`, `reference.json` and `images/*.png` under `dir`.
pub fn write_synth_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let coco = CocoFile::from_records(&ds.vocabulary, &ds.records);
    let ann = dir.join("annotations.json");
    std::fs::write(&ann, serde_json::to_string_pretty(&coco)?).map_err(|e| Error::io(&ann, e))?;
    let reference = ReferenceFile {
        images: ds
            .records
            .iter()
            .zip(&ds.reference)
            .map(|(r, shapes)| ReferenceImage {
                image_id: r.image_id,
                shapes: shapes.clone(),
            })
            .collect(),
    };
    let refp = dir.join("reference.json");
    std::fs::write(&refp, serde_json::to_string(&reference)?).map_err(|e| Error::io(&refp, e))?;
    for (rec, img) in ds.records.iter().zip(&ds.images) {
        let p = images_dir.join(&rec.file_name);
        img.save(&p)
            .map_err(|e| Error::io(&p, std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}
