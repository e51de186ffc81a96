//! Numerically careful tensor helpers that keep every step differentiable.

use candle_core::{Tensor, D};

use crate::error::Result;

/// Additive bias that removes masked keys from a softmax.
pub const MASK_NEG: f64 = -1e9;

/// `sigmoid(x) = (1 + tanh(x / 2)) / 2`; the tanh form never overflows in
/// either direction and has a bounded derivative.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Softmax over the last dimension. The max shift is detached; it cancels
/// analytically so the gradient is unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

/// Elementwise binary cross-entropy on logits:
/// `max(x, 0) - x t + ln(1 + e^{-|x|})`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus_tail = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * target)?)? + softplus_tail)?)
}
