use candle_core::{Tensor, D};

use crate::error::Result;

/// Small constant keeping GIoU denominators positive.
const GIOU_EPS: f64 = 1e-12;

/// Row-wise generalized IoU of two `[M, 4]` xyxy tensors.
pub fn giou_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (ax1, ay1, ax2, ay2) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx1, by1, bx2, by2) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hw = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let hh = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let hull = (hw * hh)?;
    let iou = (inter / (&union + GIOU_EPS)?)?;
    let penalty = ((&hull - &union)? / (&hull + GIOU_EPS)?)?;
    Ok((iou - penalty)?.squeeze(D::Minus1)?)
}

/// Per-term box regression losses over matched pairs, averaged over pairs.
#[derive(Debug, Clone)]
pub struct BoxLossTerms {
    pub l1: Tensor,
    pub giou: Tensor,
}

/// `pred: [N_q, 4]`, `gt: [N_gt, 4]`, both normalized xyxy. Returns the mean L1
/// distance and mean `1 - GIoU` over the matched pairs; both are zero (and
/// still attached to `pred`) when nothing is matched.
pub fn box_loss_terms(pred: &Tensor, gt: &Tensor, pairs: &[(usize, usize)]) -> Result<BoxLossTerms> {
    if pairs.is_empty() {
        let zero = (pred.sum_all()? * 0.0)?;
        return Ok(BoxLossTerms {
            l1: zero.clone(),
            giou: zero,
        });
    }
    let device = pred.device();
    let qi: Vec<u32> = pairs.iter().map(|&(q, _)| q as u32).collect();
    let gi: Vec<u32> = pairs.iter().map(|&(_, g)| g as u32).collect();
    let p = pred.index_select(&Tensor::new(qi.as_slice(), device)?, 0)?;
    let g = gt.index_select(&Tensor::new(gi.as_slice(), device)?, 0)?;
    let n = pairs.len() as f64;
    let l1 = ((&p - &g)?.abs()?.sum_all()? / n)?;
    let giou = ((1.0 - giou_rows(&p, &g)?)?.sum_all()? / n)?;
    Ok(BoxLossTerms { l1, giou })
}

/// `λ_l1 · L1 + λ_giou · (1 - GIoU)` over matched pairs.
pub fn box_loss(
    pred: &Tensor,
    gt: &Tensor,
    pairs: &[(usize, usize)],
    lambda_l1: f64,
    lambda_giou: f64,
) -> Result<Tensor> {
    let t = box_loss_terms(pred, gt, pairs)?;
    Ok(((t.l1 * lambda_l1)? + (t.giou * lambda_giou)?)?)
}
