use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boxes::{giou, Xyxy};
use crate::error::{Error, Result};

/// Coefficients of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

/// Query-by-ground-truth matching costs with their per-term breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub costs: Array2<f64>,
    pub class: Array2<f64>,
    pub l1: Array2<f64>,
    pub giou: Array2<f64>,
}

impl CostMatrix {
    pub fn from_costs(costs: Array2<f64>) -> Self {
        let zeros = Array2::zeros(costs.dim());
        Self {
            class: zeros.clone(),
            l1: zeros.clone(),
            giou: zeros,
            costs,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.costs.nrows()
    }

    pub fn num_gt(&self) -> usize {
        self.costs.ncols()
    }
}

/// `cost[i, j] = λ_cls (1 - score[i, class_j]) + λ_l1 |b_i - b_j|_1 + λ_giou (1 - GIoU)`.
///
/// Boxes are normalized `xyxy`. Without `category_scores` the class term is 0
/// (used for proposals, which carry no classification).
pub fn matching_cost(
    category_scores: Option<&Array2<f64>>,
    pred_boxes: &[Xyxy],
    gt_labels: &[usize],
    gt_boxes: &[Xyxy],
    weights: CostWeights,
) -> Result<CostMatrix> {
    let n = pred_boxes.len();
    let g = gt_boxes.len();
    if gt_labels.len() != g {
        return Err(Error::shape(
            "matching_cost",
            format!("{} labels for {g} boxes", gt_labels.len()),
        ));
    }
    let mut m = CostMatrix::from_costs(Array2::zeros((n, g)));
    for (i, pb) in pred_boxes.iter().enumerate() {
        if pb.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite predicted box at query {i}")));
        }
        for (j, gb) in gt_boxes.iter().enumerate() {
            if gb.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite ground-truth box {j}")));
            }
            let cls = match category_scores {
                Some(s) => {
                    let v = *s.get((i, gt_labels[j])).ok_or_else(|| {
                        Error::shape(
                            "matching_cost",
                            format!("label {} outside score columns {}", gt_labels[j], s.ncols()),
                        )
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite score at query {i}, class {}",
                            gt_labels[j]
                        )));
                    }
                    weights.lambda_cls * (1.0 - v)
                }
                None => 0.0,
            };
            let l1: f64 = pb.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
            let l1 = weights.lambda_l1 * l1;
            let gi = weights.lambda_giou * (1.0 - giou(pb, gb));
            m.class[[i, j]] = cls;
            m.l1[[i, j]] = l1;
            m.giou[[i, j]] = gi;
            m.costs[[i, j]] = cls + l1 + gi;
        }
    }
    Ok(m)
}

/// One-to-one query/ground-truth assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(query, gt)`, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl Assignment {
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, num_queries: usize) -> Self {
        pairs.sort_unstable();
        let mut used = vec![false; num_queries];
        for &(q, _) in &pairs {
            used[q] = true;
        }
        let unmatched_queries = (0..num_queries).filter(|&q| !used[q]).collect();
        Self {
            pairs,
            unmatched_queries,
        }
    }

    pub fn total_cost(&self, costs: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(q, g)| costs[[q, g]]).sum()
    }
}

/// Minimum-cost assignment of every ground truth to a distinct query.
///
/// Shortest-augmenting-path Hungarian algorithm with row/column potentials,
/// O(N_gt^2 N_q). Ties resolve toward the lowest query index because the
/// column scan keeps the first strict minimum.
pub fn hungarian_match(costs: &CostMatrix) -> Result<Assignment> {
    let c = &costs.costs;
    let (num_q, num_gt) = c.dim();
    if num_gt > num_q {
        return Err(Error::data(format!(
            "more objects than queries ({num_gt} > {num_q})"
        )));
    }
    if let Some(((i, j), _)) = c.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite cost at ({i}, {j})")));
    }
    if num_gt == 0 {
        return Ok(Assignment::from_pairs(Vec::new(), num_q));
    }

    // Rows are ground truths (1-based), columns are queries (1-based); column 0 is virtual.
    let n = num_gt;
    let m = num_q;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c[[j - 1, i0 - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (j - 1, p[j] - 1))
        .collect();
    Ok(Assignment::from_pairs(pairs, num_q))
}
