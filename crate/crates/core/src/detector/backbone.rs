use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

/// Minimum image side accepted by the backbone.
pub const MIN_IMAGE_SIDE: usize = 32;
/// Output strides of the pyramid levels.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Multi-level features, all with the same channel count.
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    /// `[B, C, H/s, W/s]` for each stride in [`STRIDES`], after lateral
    /// projection and top-down fusion.
    pub pyramid: Vec<Tensor>,
}

impl BackboneFeatures {
    /// The finest level, from which regions are pooled.
    pub fn finest(&self) -> &Tensor {
        &self.pyramid[0]
    }
}

/// Small four-stage CNN with lateral 1×1 projections and a top-down pathway.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem1: Conv2d,
    stem2: Conv2d,
    stages: Vec<Conv2d>,
    laterals: Vec<Conv2d>,
}

/// Nearest-neighbour ×2 upsampling by broadcasting, so gradients accumulate
/// like any other broadcast.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, base_width: usize, out_channels: usize) -> Result<Self> {
        if base_width < 2 {
            return Err(Error::config("backbone width must be at least 2"));
        }
        let widths = [base_width, 2 * base_width, 4 * base_width, 4 * base_width];
        let stem1 = Conv2d::new(ps, &format!("{name}.stem1"), 3, base_width / 2, 3, 2, true)?;
        let stem2 = Conv2d::new(ps, &format!("{name}.stem2"), base_width / 2, widths[0], 3, 2, true)?;
        let mut stages = Vec::new();
        for i in 1..4 {
            stages.push(Conv2d::new(
                ps,
                &format!("{name}.stage{i}"),
                widths[i - 1],
                widths[i],
                3,
                2,
                true,
            )?);
        }
        let laterals = (0..4)
            .map(|i| Conv2d::new(ps, &format!("{name}.lateral{i}"), widths[i], out_channels, 1, 1, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem1,
            stem2,
            stages,
            laterals,
        })
    }

    /// `images: [B, 3, H, W]` with `H, W` multiples of 32 and at least 32.
    pub fn forward(&self, images: &Tensor) -> Result<BackboneFeatures> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape("backbone", format!("expected 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::data(format!(
                "image {w}x{h} is too small or not a multiple of 32 (minimum {MIN_IMAGE_SIDE})"
            )));
        }
        let mut x = self.stem2.forward(&self.stem1.forward(images)?.relu()?)?.relu()?;
        let mut levels = vec![x.clone()];
        for stage in &self.stages {
            x = stage.forward(&x)?.relu()?;
            levels.push(x.clone());
        }
        let mut pyramid: Vec<Tensor> = Vec::with_capacity(4);
        let mut top: Option<Tensor> = None;
        for i in (0..4).rev() {
            let lateral = self.laterals[i].forward(&levels[i])?;
            let p = match &top {
                Some(t) => (lateral + upsample2(t)?)?,
                None => lateral,
            };
            top = Some(p.clone());
            pyramid.push(p);
        }
        pyramid.reverse();
        Ok(BackboneFeatures { pyramid })
    }
}
