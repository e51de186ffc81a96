use candle_core::Tensor;

use crate::boxes::Xyxy;
use crate::error::{Error, Result};

/// Fixed-size bilinear region pooling.
///
/// `features: [B, C, Hf, Wf]`; `boxes[b]` holds normalized xyxy boxes for image
/// `b` (the same count for every image). One bilinear sample is taken at each
/// bin centre. Sampling positions are constants, so gradients flow to the
/// features only. Returns `[B * N, size, size, C]`.
pub fn roi_pool(features: &Tensor, boxes: &[Vec<Xyxy>], size: usize) -> Result<Tensor> {
    let (b, c, hf, wf) = features.dims4()?;
    if boxes.len() != b {
        return Err(Error::shape(
            "roi_pool",
            format!("{} box lists for batch of {b}", boxes.len()),
        ));
    }
    let n = boxes.first().map_or(0, Vec::len);
    if boxes.iter().any(|v| v.len() != n) {
        return Err(Error::shape("roi_pool", "ragged box lists"));
    }
    let samples = b * n * size * size;
    let mut index = Vec::with_capacity(samples * 4);
    let mut weight = Vec::with_capacity(samples * 4);
    for (bi, image_boxes) in boxes.iter().enumerate() {
        let base = bi * hf * wf;
        for bx in image_boxes {
            for v in 0..size {
                let fy = (bx[1] + (v as f64 + 0.5) / size as f64 * (bx[3] - bx[1])) * hf as f64 - 0.5;
                let fy = fy.clamp(0.0, (hf - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(hf - 1);
                let ly = fy - y0 as f64;
                for u in 0..size {
                    let fx =
                        (bx[0] + (u as f64 + 0.5) / size as f64 * (bx[2] - bx[0])) * wf as f64 - 0.5;
                    let fx = fx.clamp(0.0, (wf - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(wf - 1);
                    let lx = fx - x0 as f64;
                    for (y, x, w) in [
                        (y0, x0, (1.0 - ly) * (1.0 - lx)),
                        (y0, x1, (1.0 - ly) * lx),
                        (y1, x0, ly * (1.0 - lx)),
                        (y1, x1, ly * lx),
                    ] {
                        index.push((base + y * wf + x) as u32);
                        weight.push(w);
                    }
                }
            }
        }
    }
    let device = features.device();
    let flat = features.permute((0, 2, 3, 1))?.reshape((b * hf * wf, c))?;
    let index = Tensor::from_vec(index, samples * 4, device)?;
    let weight = Tensor::from_vec(weight, (samples * 4, 1), device)?.to_dtype(features.dtype())?;
    let gathered = flat.index_select(&index, 0)?.broadcast_mul(&weight)?;
    Ok(gathered
        .reshape((samples, 4, c))?
        .sum(1)?
        .reshape((b * n, size, size, c))?
        .contiguous()?)
}

/// Reads `[B, N, 4]` into per-image box lists.
pub fn boxes_to_vec(t: &Tensor) -> Result<Vec<Vec<Xyxy>>> {
    let (b, n, four) = t.dims3()?;
    if four != 4 {
        return Err(Error::shape("boxes_to_vec", format!("last dim {four}")));
    }
    let v = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok((0..b)
        .map(|bi| {
            (0..n)
                .map(|i| {
                    let o = (bi * n + i) * 4;
                    [v[o], v[o + 1], v[o + 2], v[o + 3]]
                })
                .collect()
        })
        .collect())
}
