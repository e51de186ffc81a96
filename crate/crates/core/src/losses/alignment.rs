use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::ops::{bce_with_logits, sigmoid};

/// Lower/upper clamp applied to scores before taking logarithms.
pub const SCORE_EPS: f64 = 1e-7;

fn check_shapes(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "alignment_loss",
            format!("scores {:?} vs target {:?}", a.dims(), b.dims()),
        ));
    }
    if mask.rank() != a.rank() || mask.dims().last() != a.dims().last() {
        return Err(Error::shape(
            "alignment_loss",
            format!("mask {:?} does not broadcast to {:?}", mask.dims(), a.dims()),
        ));
    }
    Ok(())
}

fn reduce(per_token: &Tensor, mask: &Tensor) -> Result<Tensor> {
    // Sum over tokens, mean over every query (and batch element).
    let per_query = per_token.broadcast_mul(mask)?.sum(D::Minus1)?;
    Ok(per_query.mean_all()?)
}

/// Region-word binary cross-entropy on alignment scores `S ∈ [0, 1]`.
///
/// `-(T log S + (1 - T) log(1 - S))` summed over valid tokens and averaged over
/// queries. `mask` holds 1 on valid tokens and 0 on pads; it may have a
/// singleton query axis (`[.., 1, L]`).
pub fn alignment_loss(scores: &Tensor, target: &Tensor, valid_mask: &Tensor) -> Result<Tensor> {
    check_shapes(scores, target, valid_mask)?;
    let s = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?;
    let pos = (target * s.log()?)?;
    let neg = ((1.0 - target)? * (1.0 - &s)?.log()?)?;
    let per_token = (pos + neg)?.neg()?;
    reduce(&per_token, valid_mask)
}

/// Same loss evaluated from the pre-sigmoid logits, stable for any magnitude.
/// Its gradient with respect to the logits is `(S - T) / N_queries` on valid tokens.
pub fn alignment_loss_from_logits(
    logits: &Tensor,
    target: &Tensor,
    valid_mask: &Tensor,
) -> Result<Tensor> {
    check_shapes(logits, target, valid_mask)?;
    reduce(&bce_with_logits(logits, target)?, valid_mask)
}

/// Alignment loss with each token's cross-entropy scaled by `|T - S|^gamma`,
/// down-weighting tokens that are already well classified. `gamma = 0` is
/// exactly [`alignment_loss_from_logits`].
pub fn focal_alignment_loss_from_logits(
    logits: &Tensor,
    target: &Tensor,
    valid_mask: &Tensor,
    gamma: f64,
) -> Result<Tensor> {
    if gamma == 0.0 {
        return alignment_loss_from_logits(logits, target, valid_mask);
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    check_shapes(logits, target, valid_mask)?;
    let modulation = (target - sigmoid(logits)?)?.abs()?.powf(gamma)?;
    reduce(&(bce_with_logits(logits, target)? * modulation)?, valid_mask)
}
