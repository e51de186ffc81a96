//! Deliberately naive reference implementations used as test oracles.

use dethub::boxes::Xyxy;
use dethub::engine::{GroundTruth, Prediction, COCO_IOU_THRESHOLDS, RECALL_POINTS};
use dethub::queryhub::DynamicKernel;

/// Minimum total cost over every injective map from ground truths (columns)
/// to queries (rows), by plain recursion.
pub fn exhaustive_min_cost(costs: &[Vec<f64>]) -> f64 {
    fn go(costs: &[Vec<f64>], gt: usize, used: &mut Vec<bool>) -> f64 {
        let num_gt = costs.first().map_or(0, Vec::len);
        if gt == num_gt {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for q in 0..costs.len() {
            if !used[q] {
                used[q] = true;
                best = best.min(costs[q][gt] + go(costs, gt + 1, used));
                used[q] = false;
            }
        }
        best
    }
    go(costs, 0, &mut vec![false; costs.len()])
}

fn box_iou(a: &Xyxy, b: &Xyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Average precision of one category at one threshold, straight from the
/// definitions: rank detections, match each to the best free ground truth in
/// its image, then average the best precision reachable at each recall level.
fn category_ap(preds: &[&Prediction], gts: &[&GroundTruth], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut curve = Vec::new();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let p = preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.image_id != p.image_id {
                continue;
            }
            let iou = box_iou(&p.bbox, &g.bbox);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
            tp += 1;
        }
        let recall = tp as f64 / gts.len() as f64;
        let precision = tp as f64 / (rank + 1) as f64;
        curve.push((recall, precision));
    }
    let levels = RECALL_POINTS - 1;
    (0..=levels)
        .map(|k| {
            let r = k as f64 / levels as f64;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / RECALL_POINTS as f64
}

/// Brute-force COCO-style evaluation: `(AP, AP50, AP75, per-category AP)`.
pub fn brute_force_map(
    preds: &[Prediction],
    gts: &[GroundTruth],
    num_categories: usize,
) -> (f64, Option<f64>, Option<f64>, Vec<Option<f64>>) {
    let per_cat_threshold: Vec<Option<Vec<f64>>> = (0..num_categories)
        .map(|c| {
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
            if g.is_empty() {
                return None;
            }
            let p: Vec<&Prediction> = preds.iter().filter(|p| p.category == c).collect();
            Some(
                COCO_IOU_THRESHOLDS
                    .iter()
                    .map(|&t| category_ap(&p, &g, t))
                    .collect(),
            )
        })
        .collect();
    let present: Vec<&Vec<f64>> = per_cat_threshold.iter().flatten().collect();
    let at = |t: usize| -> Option<f64> {
        (!present.is_empty())
            .then(|| present.iter().map(|v| v[t]).sum::<f64>() / present.len() as f64)
    };
    let ap = if present.is_empty() {
        0.0
    } else {
        present
            .iter()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .sum::<f64>()
            / present.len() as f64
    };
    let per_category = per_cat_threshold
        .iter()
        .map(|v| v.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    (ap, at(0), at(5), per_category)
}

/// Group count used by the bottleneck normalization for `c_mid` channels.
pub fn norm_groups(c_mid: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| c_mid % g == 0).unwrap_or(1)
}

/// Same-padded convolution of one `[h][w][c_in]` map with a `[k][k][c_in][c_out]` kernel.
fn sliding_conv(x: &[f64], h: usize, w: usize, c_in: usize, kernel: &[f64], k: usize, c_out: usize) -> Vec<f64> {
    let pad = k as isize / 2;
    let mut out = vec![0.0; h * w * c_out];
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..k {
                for dx in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    let sx = xx as isize + dx as isize - pad;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    for c in 0..c_in {
                        let v = x[(sy * w + sx) * c_in + c];
                        for o in 0..c_out {
                            out[(y * w + xx) * c_out + o] +=
                                v * kernel[((dy * k + dx) * c_in + c) * c_out + o];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-query bottleneck filter computed with explicit loops. With `norm`
/// (`gamma`, `beta`) the intermediate map is group-normalized and rectified.
pub fn sliding_window_dyconv(
    x: &[f64],
    h: usize,
    w: usize,
    kernel: &DynamicKernel,
    norm: Option<(&[f64], &[f64])>,
) -> Vec<f64> {
    let s = kernel.shape;
    let mut mid = sliding_conv(x, h, w, s.c_in, &kernel.k1, s.k, s.c_mid);
    if let Some((gamma, beta)) = norm {
        let groups = norm_groups(s.c_mid);
        let per = s.c_mid / groups;
        for g in 0..groups {
            let chans = g * per..(g + 1) * per;
            let vals: Vec<f64> = (0..h * w)
                .flat_map(|p| chans.clone().map(move |c| (p, c)))
                .map(|(p, c)| mid[p * s.c_mid + c])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for p in 0..h * w {
                for c in chans.clone() {
                    let v = &mut mid[p * s.c_mid + c];
                    *v = ((*v - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c]).max(0.0);
                }
            }
        }
    }
    sliding_conv(&mid, h, w, s.c_mid, &kernel.k2, s.k, s.c_out)
}

fn pred(image_id: u64, category: usize, score: f64, bbox: Xyxy) -> Prediction {
    Prediction {
        image_id,
        category,
        score,
        bbox,
    }
}

fn gt(image_id: u64, category: usize, bbox: Xyxy) -> GroundTruth {
    GroundTruth {
        image_id,
        category,
        bbox,
    }
}

/// Handcrafted evaluation scenarios: `(name, predictions, ground truth, categories)`.
pub fn map_fixtures() -> Vec<(&'static str, Vec<Prediction>, Vec<GroundTruth>, usize)> {
    let a = [10.0, 10.0, 50.0, 50.0];
    let b = [60.0, 20.0, 90.0, 70.0];
    let c = [5.0, 60.0, 40.0, 95.0];
    let shifted = |bx: Xyxy, dx: f64| [bx[0] + dx, bx[1], bx[2] + dx, bx[3]];
    vec![
        ("perfect single", vec![pred(1, 0, 0.9, a)], vec![gt(1, 0, a)], 1),
        ("no predictions", vec![], vec![gt(1, 0, a), gt(2, 0, b)], 1),
        (
            "false positive ranked first",
            vec![pred(1, 0, 0.95, b), pred(1, 0, 0.6, a)],
            vec![gt(1, 0, a)],
            1,
        ),
        (
            "duplicate detections",
            vec![pred(1, 0, 0.9, a), pred(1, 0, 0.8, a), pred(1, 0, 0.7, shifted(a, 2.0))],
            vec![gt(1, 0, a)],
            1,
        ),
        (
            "localization sweep",
            vec![
                pred(1, 0, 0.9, shifted(a, 4.0)),
                pred(2, 0, 0.8, shifted(b, 6.0)),
                pred(3, 0, 0.7, shifted(c, 1.0)),
            ],
            vec![gt(1, 0, a), gt(2, 0, b), gt(3, 0, c)],
            1,
        ),
        (
            "wrong category",
            vec![pred(1, 1, 0.9, a), pred(1, 0, 0.3, b)],
            vec![gt(1, 0, a), gt(1, 1, b)],
            2,
        ),
        (
            "category without ground truth",
            vec![pred(1, 0, 0.9, a), pred(1, 2, 0.8, b)],
            vec![gt(1, 0, a), gt(1, 1, c)],
            3,
        ),
        (
            "cross-image detections do not match",
            vec![pred(2, 0, 0.9, a), pred(1, 0, 0.5, a)],
            vec![gt(1, 0, a)],
            1,
        ),
        (
            "competing overlaps",
            vec![
                pred(1, 0, 0.9, [10.0, 10.0, 45.0, 50.0]),
                pred(1, 0, 0.85, [12.0, 10.0, 52.0, 50.0]),
            ],
            vec![gt(1, 0, a), gt(1, 0, [20.0, 10.0, 60.0, 50.0])],
            1,
        ),
        (
            "half recall",
            vec![pred(1, 0, 0.9, a), pred(2, 0, 0.8, [0.0, 0.0, 5.0, 5.0])],
            vec![gt(1, 0, a), gt(2, 0, b)],
            1,
        ),
    ]
}
