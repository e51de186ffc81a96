//! Query/ground-truth set matching and the training objective.
//!
//! Every decoder stage is matched independently and receives the region-word
//! alignment loss plus box regression; proposal stages receive box terms only.

mod alignment;
mod boxloss;
mod matching;

pub use alignment::{
    alignment_loss, alignment_loss_from_logits, focal_alignment_loss_from_logits, SCORE_EPS,
};
pub use boxloss::{box_loss, box_loss_terms, giou_rows, BoxLossTerms};
pub use matching::{hungarian_match, matching_cost, Assignment, CostMatrix, CostWeights};

pub use crate::taxonomy::{make_target_matrix, TargetMatrix};

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boxes::Xyxy;
use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;
use crate::taxonomy::{pool_category_scores, DetectionPrompt};

/// Weights of the training objective and of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Multiplier on the alignment loss.
    pub lambda_align: f64,
    /// Focal exponent on the alignment cross-entropy; 0 keeps it plain.
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        let c = CostWeights::default();
        Self {
            lambda_cls: c.lambda_cls,
            lambda_l1: c.lambda_l1,
            lambda_giou: c.lambda_giou,
            lambda_align: 1.0,
            focal_gamma: 0.0,
        }
    }
}

impl LossWeights {
    pub fn cost(&self) -> CostWeights {
        CostWeights {
            lambda_cls: self.lambda_cls,
            lambda_l1: self.lambda_l1,
            lambda_giou: self.lambda_giou,
        }
    }
}

/// One supervised stage of a single image.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// `[N_q, 4]` normalized xyxy.
    pub boxes: Tensor,
    /// `[N_q, L]` pre-sigmoid alignment logits; `None` for proposal stages.
    pub token_logits: Option<Tensor>,
}

/// Ground truth of one image in normalized xyxy, labels indexing `prompt`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageTargets {
    pub labels: Vec<usize>,
    pub boxes: Vec<Xyxy>,
}

/// Scalar loss components summed over stages, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub align: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.align += other.align;
        self.l1 += other.l1;
        self.giou += other.giou;
    }

    pub fn scale(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * s,
            align: self.align * s,
            l1: self.l1 * s,
            giou: self.giou * s,
        }
    }
}

fn tensor_to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((r, c), v).map_err(|e| Error::shape("tensor_to_array2", e.to_string()))
}

/// Per-pair assignment of one stage, using pooled category scores when the
/// stage classifies.
pub fn match_stage(
    stage: &StageOutput,
    targets: &ImageTargets,
    prompt: &DetectionPrompt,
    weights: CostWeights,
) -> Result<Assignment> {
    let n = stage.boxes.dims2()?.0;
    if targets.labels.is_empty() {
        return Ok(Assignment::from_pairs(Vec::new(), n));
    }
    let pred = tensor_to_array2(&stage.boxes.detach())?;
    let pred_boxes: Vec<Xyxy> = pred
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect();
    let scores = match &stage.token_logits {
        Some(logits) => {
            let s = tensor_to_array2(&sigmoid(&logits.detach())?)?;
            Some(pool_category_scores(&s, prompt))
        }
        None => None,
    };
    let costs = matching_cost(
        scores.as_ref(),
        &pred_boxes,
        &targets.labels,
        &targets.boxes,
        weights,
    )?;
    hungarian_match(&costs)
}

/// Deep-supervised objective of one image.
///
/// `valid_mask: [1, L]` holds 1 on non-pad tokens. Returns the differentiable
/// total and its breakdown summed over stages.
pub fn total_loss(
    stages: &[StageOutput],
    targets: &ImageTargets,
    prompt: &DetectionPrompt,
    valid_mask: &Tensor,
    weights: &LossWeights,
    dataset: &str,
) -> Result<(Tensor, LossBreakdown)> {
    let first = stages
        .first()
        .ok_or_else(|| Error::config("total_loss needs at least one stage"))?;
    let device = first.boxes.device().clone();
    let dtype = first.boxes.dtype();
    let gt = if targets.boxes.is_empty() {
        Tensor::zeros((0, 4), dtype, &device)?
    } else {
        let flat: Vec<f64> = targets.boxes.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (targets.boxes.len(), 4), &device)?.to_dtype(dtype)?
    };
    let mut total: Option<Tensor> = None;
    let mut parts = LossBreakdown::default();
    for stage in stages {
        let assignment = match_stage(stage, targets, prompt, weights.cost())?;
        let terms = box_loss_terms(&stage.boxes, &gt, &assignment.pairs)?;
        let mut stage_loss =
            ((&terms.l1 * weights.lambda_l1)? + (&terms.giou * weights.lambda_giou)?)?;
        parts.l1 += terms.l1.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        parts.giou += terms.giou.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if let Some(logits) = &stage.token_logits {
            let n = logits.dims2()?.0;
            let target = make_target_matrix(&targets.labels, prompt, n, &assignment, dataset)?;
            let t = Tensor::from_vec(
                target.t_hat.iter().copied().collect::<Vec<f64>>(),
                target.t_hat.dim(),
                &device,
            )?
            .to_dtype(dtype)?;
            let align = focal_alignment_loss_from_logits(logits, &t, valid_mask, weights.focal_gamma)?;
            parts.align += align.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            stage_loss = (stage_loss + (align * weights.lambda_align)?)?;
        }
        total = Some(match total {
            Some(t) => (t + stage_loss)?,
            None => stage_loss,
        });
    }
    let total = total.expect("at least one stage");
    parts.total = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (align {}, l1 {}, giou {})",
            parts.align, parts.l1, parts.giou
        )));
    }
    Ok((total, parts))
}
