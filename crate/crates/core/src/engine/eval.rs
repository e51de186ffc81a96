use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, is_valid, Xyxy};
use crate::error::{Error, Result};

/// IoU thresholds `.50:.05:.95`.
pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Recall sampling points `0:.01:1`.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category: usize,
    pub bbox: Xyxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub category: usize,
    pub score: f64,
    pub bbox: Xyxy,
}

/// Output of [`compute_map`]. AP values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Mean over categories with ground truth, then over thresholds.
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// Category AP averaged over thresholds; `None` without ground truth.
    pub per_category: Vec<Option<f64>>,
    /// Mean over categories at each threshold.
    pub per_threshold: Vec<f64>,
    pub instances: Vec<usize>,
}

/// Interpolated average precision over [`RECALL_POINTS`] recall levels.
///
/// `is_tp` lists detections in descending score order.
pub fn interpolated_ap(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in is_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Greedy matching of one image's detections (descending score) at `threshold`:
/// each detection takes the unmatched ground truth of highest IoU ≥ threshold.
fn greedy_match(dets: &[&Prediction], gts: &[&GroundTruth], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= threshold && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// COCO-style mean average precision over `num_categories` categories.
///
/// Detections are ranked by descending score (ties keep input order).
/// Categories without ground truth are reported as `None` and excluded from
/// the mean; with no ground truth at all the mean is 0.
pub fn compute_map(
    predictions: &[Prediction],
    ground_truths: &[GroundTruth],
    num_categories: usize,
    iou_thresholds: &[f64],
) -> Result<MapResult> {
    if iou_thresholds.is_empty() {
        return Err(Error::config("compute_map needs at least one IoU threshold"));
    }
    for p in predictions {
        if !is_valid(&p.bbox) || !p.score.is_finite() {
            return Err(Error::data(format!(
                "malformed prediction on image {}: box {:?}, score {}",
                p.image_id, p.bbox, p.score
            )));
        }
        if p.category >= num_categories {
            return Err(Error::data(format!("prediction category {} out of range", p.category)));
        }
    }
    for g in ground_truths {
        if !is_valid(&g.bbox) || g.category >= num_categories {
            return Err(Error::data(format!(
                "malformed ground truth on image {}: box {:?}, category {}",
                g.image_id, g.bbox, g.category
            )));
        }
    }

    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));

    let mut per_cat_thr = vec![vec![None; iou_thresholds.len()]; num_categories];
    let mut instances = vec![0usize; num_categories];
    for (c, row) in per_cat_thr.iter_mut().enumerate() {
        let mut gts: BTreeMap<u64, Vec<&GroundTruth>> = BTreeMap::new();
        for g in ground_truths.iter().filter(|g| g.category == c) {
            gts.entry(g.image_id).or_default().push(g);
        }
        let num_gt: usize = gts.values().map(Vec::len).sum();
        instances[c] = num_gt;
        if num_gt == 0 {
            continue;
        }
        let ranked: Vec<(usize, &Prediction)> = order
            .iter()
            .enumerate()
            .map(|(rank, &i)| (rank, &predictions[i]))
            .filter(|(_, p)| p.category == c)
            .collect();
        let mut dets: BTreeMap<u64, Vec<(usize, &Prediction)>> = BTreeMap::new();
        for &(rank, p) in &ranked {
            dets.entry(p.image_id).or_default().push((rank, p));
        }
        for (t, &thr) in iou_thresholds.iter().enumerate() {
            let mut flags: Vec<(usize, bool)> = Vec::with_capacity(ranked.len());
            for (img, list) in &dets {
                let preds: Vec<&Prediction> = list.iter().map(|(_, p)| *p).collect();
                let image_gts = gts.get(img).map(Vec::as_slice).unwrap_or(&[]);
                let tp = greedy_match(&preds, image_gts, thr);
                flags.extend(list.iter().map(|(r, _)| *r).zip(tp));
            }
            flags.sort_by_key(|(r, _)| *r);
            let is_tp: Vec<bool> = flags.into_iter().map(|(_, f)| f).collect();
            row[t] = Some(interpolated_ap(&is_tp, num_gt));
        }
    }

    let per_threshold: Vec<f64> = (0..iou_thresholds.len())
        .map(|t| {
            let vals: Vec<f64> = per_cat_thr.iter().filter_map(|r| r[t]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let ap = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    let at = |x: f64| {
        iou_thresholds
            .iter()
            .position(|&t| (t - x).abs() < 1e-9)
            .map(|i| per_threshold[i])
    };
    Ok(MapResult {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        per_category: per_cat_thr
            .iter()
            .map(|r| {
                let vals: Option<Vec<f64>> = r.iter().copied().collect();
                vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect(),
        per_threshold,
        instances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub instances: usize,
    /// `None` when the category has no ground truth in the evaluated split.
    pub ap: Option<f64>,
}

/// Metrics of one dataset, computed only over its own vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub images: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub categories: Vec<CategoryReport>,
}

impl DatasetReport {
    pub fn from_map(dataset: &str, images: usize, categories: &[String], m: &MapResult) -> Self {
        Self {
            dataset: dataset.to_string(),
            images,
            ap: m.ap,
            ap50: m.ap50.unwrap_or(0.0),
            ap75: m.ap75.unwrap_or(0.0),
            categories: categories
                .iter()
                .zip(&m.per_category)
                .zip(&m.instances)
                .map(|((name, ap), &instances)| CategoryReport {
                    name: name.clone(),
                    instances,
                    ap: *ap,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub embedder_id: String,
    pub step: usize,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: BTreeMap<String, DatasetReport>,
    pub metadata: RunMetadata,
}

/// One exported detection, box as COCO `[x, y, w, h]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub dataset: String,
    pub category: String,
    pub category_id: u64,
    pub score: f64,
    pub bbox: [f64; 4],
}
