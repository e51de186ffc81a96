//! The full detector: backbone, query-based proposals, a stack of
//! query-adapted decoder stages, and region-word alignment scoring.

mod backbone;
mod pooling;

pub use backbone::{Backbone, BackboneFeatures, MIN_IMAGE_SIDE, STRIDES};
pub use pooling::{boxes_to_vec, roi_pool};

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boxes::Xyxy;
use crate::error::{Error, Result};
use crate::losses::StageOutput;
use crate::nn::ops::sigmoid;
use crate::nn::{Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::queryhub::{DyConv, KernelShape, QueryAdapter, QuerySet};
use crate::taxonomy::{pool_category_scores, DatasetEmbedding, DetectionPrompt};

/// Boxes narrower or shorter than this (normalized) are clamped up.
pub const MIN_BOX_SIDE: f64 = 1e-4;
/// Bound on log-scale box deltas, keeping `exp` finite.
const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of queries, object features and the shared visual-language space.
    pub d: usize,
    pub heads: usize,
    /// Decoder stages after the proposal stage.
    pub stages: usize,
    pub backbone_width: usize,
    /// Channels of the pyramid and of pooled region features.
    pub feature_channels: usize,
    pub pool_size: usize,
    /// Square input side; images are resized to it.
    pub image_size: usize,
    /// Prompt length in tokens.
    pub max_length: usize,
    /// Detections kept per image at inference.
    pub top_k: usize,
    /// Restricts query self-attention to the diagonal.
    pub per_query_decoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            stages: 6,
            backbone_width: 32,
            feature_channels: 64,
            pool_size: 7,
            image_size: 128,
            max_length: 512,
            top_k: 100,
            per_query_decoding: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueriesConfig {
    pub count: usize,
}

impl Default for QueriesConfig {
    fn default() -> Self {
        Self { count: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DyConvConfig {
    pub kernel_size: usize,
    /// `c_mid = round(feature_channels * bottleneck_ratio)`.
    pub bottleneck_ratio: f64,
    /// Identity normalization/activation between the two kernels.
    pub linear_test_mode: bool,
}

impl Default for DyConvConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            bottleneck_ratio: 0.25,
            linear_test_mode: false,
        }
    }
}

/// How the classification prompt and query conditioning are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptationMode {
    /// Per-dataset prompt; queries adapted to it.
    QueryAdaptation,
    /// One prompt over the union of all vocabularies; queries are not adapted.
    GlobalEmbedding,
    /// Prompt rebuilt per training image from the categories it contains.
    InstanceEmbedding,
}

impl AdaptationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptationMode::QueryAdaptation => "query-adaptation",
            AdaptationMode::GlobalEmbedding => "global-embedding",
            AdaptationMode::InstanceEmbedding => "instance-embedding",
        }
    }
}

impl std::str::FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query-adaptation" => Ok(Self::QueryAdaptation),
            "global-embedding" => Ok(Self::GlobalEmbedding),
            "instance-embedding" => Ok(Self::InstanceEmbedding),
            other => Err(Error::config(format!("unknown adaptation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub mode: AdaptationMode,
    /// Adapt the proposal stage's queries.
    pub rpn: bool,
    /// Adapt every decoder stage's queries.
    pub decoder: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            mode: AdaptationMode::QueryAdaptation,
            rpn: true,
            decoder: true,
        }
    }
}

impl AdaptationConfig {
    pub fn adapt_rpn(&self) -> bool {
        self.rpn && self.mode != AdaptationMode::GlobalEmbedding
    }

    pub fn adapt_decoder(&self) -> bool {
        self.decoder && self.mode != AdaptationMode::GlobalEmbedding
    }
}

/// Everything needed to build a [`Detector`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub model: ModelConfig,
    pub queries: QueriesConfig,
    pub dyconv: DyConvConfig,
    pub adaptation: AdaptationConfig,
}

impl DetectorConfig {
    pub fn kernel_shape(&self) -> Result<KernelShape> {
        let c = self.model.feature_channels;
        let c_mid = (c as f64 * self.dyconv.bottleneck_ratio).round() as usize;
        let shape = KernelShape {
            k: self.dyconv.kernel_size,
            c_in: c,
            c_mid,
            c_out: c,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || m.d % m.heads != 0 {
            return Err(Error::config(format!(
                "model.d = {} must be a positive multiple of model.heads = {}",
                m.d, m.heads
            )));
        }
        if self.queries.count == 0 {
            return Err(Error::config("queries.count must be positive"));
        }
        if m.stages == 0 {
            return Err(Error::config("model.stages must be at least 1"));
        }
        if m.pool_size == 0 {
            return Err(Error::config("model.pool_size must be positive"));
        }
        if m.image_size < MIN_IMAGE_SIDE || m.image_size % 32 != 0 {
            return Err(Error::config(format!(
                "model.image_size = {} must be a multiple of 32 and at least {MIN_IMAGE_SIDE}",
                m.image_size
            )));
        }
        if m.max_length < 2 {
            return Err(Error::config("model.max_length must be at least 2"));
        }
        self.kernel_shape()?;
        Ok(())
    }
}

/// Per-image conditioning inputs stacked over a batch.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `[B, L, embed_dim]` frozen token embeddings.
    pub e: Tensor,
    /// `[B, L, d]` frozen language features.
    pub f_e: Tensor,
    pub valid_lens: Vec<usize>,
    /// `[B, 1, L]`, 1 on valid tokens.
    pub valid_mask: Tensor,
}

fn array_to_tensor(a: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, a.dim(), device)?.to_dtype(dtype)?)
}

impl Conditioning {
    pub fn new(embeddings: &[&DatasetEmbedding], dtype: DType, device: &Device) -> Result<Self> {
        let first = embeddings
            .first()
            .ok_or_else(|| Error::data("conditioning needs at least one embedding"))?;
        let l = first.token_count();
        if embeddings.iter().any(|e| e.token_count() != l) {
            return Err(Error::shape(
                "conditioning",
                "embeddings in one batch must share the prompt length",
            ));
        }
        let e = embeddings
            .iter()
            .map(|x| array_to_tensor(&x.e, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let f_e = embeddings
            .iter()
            .map(|x| array_to_tensor(&x.f_e, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let valid_lens: Vec<usize> = embeddings.iter().map(|x| x.valid_len).collect();
        let mask: Vec<f64> = valid_lens
            .iter()
            .flat_map(|&n| (0..l).map(move |j| f64::from(j < n)))
            .collect();
        Ok(Self {
            e: Tensor::stack(&e, 0)?,
            f_e: Tensor::stack(&f_e, 0)?,
            valid_mask: Tensor::from_vec(mask, (embeddings.len(), 1, l), device)?.to_dtype(dtype)?,
            valid_lens,
        })
    }

    pub fn batch(&self) -> usize {
        self.valid_lens.len()
    }
}

/// `S = sigmoid(F_C · F_Eᵀ)` with pad tokens set to 0.
///
/// `f_c: [N, d]` or `[B, N, d]`; `f_e: [L, d]` or `[B, L, d]`; `valid_mask`
/// broadcastable to the score shape.
pub fn align_scores(f_c: &Tensor, f_e: &Tensor, valid_mask: &Tensor) -> Result<Tensor> {
    let logits = align_logits(f_c, f_e)?;
    Ok(sigmoid(&logits)?.broadcast_mul(valid_mask)?)
}

/// Pre-sigmoid alignment logits `F_C · F_Eᵀ`.
pub fn align_logits(f_c: &Tensor, f_e: &Tensor) -> Result<Tensor> {
    let dc = f_c.dims().last().copied();
    let de = f_e.dims().last().copied();
    if dc != de || f_c.rank() != f_e.rank() {
        return Err(Error::shape(
            "align_scores",
            format!("F_C {:?} vs F_E {:?}", f_c.dims(), f_e.dims()),
        ));
    }
    let f_et = f_e.transpose(D::Minus1, D::Minus2)?.contiguous()?;
    Ok(f_c.contiguous()?.matmul(&f_et)?)
}

/// Query boxes in normalized `(cx, cy, w, h)` plus their object features.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    /// `[B, N, 4]` normalized cxcywh.
    pub boxes: Tensor,
    /// `[B, N, d]`.
    pub object_features: Tensor,
}

/// Clamps normalized xyxy boxes into the unit square with a minimum side;
/// returns the sanitized boxes and how many needed the minimum-side fix.
pub fn sanitize_boxes(boxes: &mut [Xyxy]) -> usize {
    let mut degenerate = 0;
    for b in boxes.iter_mut() {
        for v in b.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.5 };
        }
        for (lo, hi) in [(0, 2), (1, 3)] {
            if b[hi] - b[lo] < MIN_BOX_SIDE {
                degenerate += 1;
                let c = (0.5 * (b[lo] + b[hi])).clamp(0.5 * MIN_BOX_SIDE, 1.0 - 0.5 * MIN_BOX_SIDE);
                b[lo] = c - 0.5 * MIN_BOX_SIDE;
                b[hi] = c + 0.5 * MIN_BOX_SIDE;
            }
        }
    }
    degenerate
}

fn cxcywh_to_xyxy_t(b: &Tensor) -> Result<Tensor> {
    let c = b.narrow(D::Minus1, 0, 2)?;
    let half = (b.narrow(D::Minus1, 2, 2)? * 0.5)?;
    Ok(Tensor::cat(&[(&c - &half)?, (&c + &half)?], D::Minus1)?)
}

fn xyxy_to_cxcywh_vec(b: &Xyxy) -> [f64; 4] {
    crate::boxes::xyxy_to_cxcywh(*b)
}

/// One query-adapted stage: pooled region features filtered by each query's
/// dynamic kernels, then box regression and (optionally) classification
/// features.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub adapter: QueryAdapter,
    pub dyconv: DyConv,
    out_proj: Linear,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
    box_hidden: Linear,
    box_out: Linear,
    cls_head: Option<Linear>,
    pool_size: usize,
}

/// Raw tensors produced by one stage for a batch.
#[derive(Debug, Clone)]
pub struct StageTensors {
    /// `[B, N, 4]` refined boxes, normalized xyxy clamped to the unit square.
    pub boxes: Tensor,
    /// `[B, N, d]` object features (next stage's queries).
    pub object_features: Tensor,
    /// `[B, N, d]` classification features `F_C`.
    pub f_c: Option<Tensor>,
    /// `[B, N, d]` adapted and interacted queries of this stage.
    pub q_star: Tensor,
}

impl DecoderStage {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &DetectorConfig,
        embed_dim: usize,
        classify: bool,
    ) -> Result<Self> {
        let m = &cfg.model;
        let shape = cfg.kernel_shape()?;
        let mut adapter = QueryAdapter::new(ps, &format!("{name}.adapter"), m.d, embed_dim, m.heads)?;
        adapter.interaction.isolate_queries = m.per_query_decoding;
        let pooled = m.pool_size * m.pool_size * shape.c_out;
        Ok(Self {
            adapter,
            dyconv: DyConv::new(
                ps,
                &format!("{name}.dyconv"),
                m.d,
                shape,
                cfg.dyconv.linear_test_mode,
            )?,
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), pooled, m.d, true)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), m.d)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), m.d, 2 * m.d)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), m.d)?,
            box_hidden: Linear::new(ps, &format!("{name}.box_hidden"), m.d, m.d, true)?,
            box_out: Linear::with_init(ps, &format!("{name}.box_out"), m.d, 4, true, Init::Zeros)?,
            cls_head: if classify {
                Some(Linear::with_init(
                    ps,
                    &format!("{name}.cls"),
                    m.d,
                    m.d,
                    true,
                    Init::XavierUniform {
                        fan_in: m.d,
                        fan_out: m.d,
                        gain: 0.1,
                    },
                )?)
            } else {
                None
            },
            pool_size: m.pool_size,
        })
    }

    /// `boxes: [B, N, 4]` normalized cxcywh (gradients flow into the refined
    /// boxes through it); `q: [B, N, d]`.
    pub fn forward(
        &self,
        features: &Tensor,
        boxes: &Tensor,
        q: &Tensor,
        embedding: Option<(&Tensor, &[usize])>,
    ) -> Result<(StageTensors, usize)> {
        let (b, n, d) = q.dims3()?;
        let mut pool_boxes: Vec<Vec<Xyxy>> = boxes_to_vec(&cxcywh_to_xyxy_t(&boxes.detach())?)?;
        let degenerate: usize = pool_boxes.iter_mut().map(|v| sanitize_boxes(v)).sum();

        let (_, q_star) = self.adapter.forward(q, embedding)?;
        let region = roi_pool(features, &pool_boxes, self.pool_size)?;
        let filtered = self.dyconv.forward(&region, &q_star.reshape((b * n, d))?)?;
        let flat = filtered.reshape((b, n, ()))?;
        let h = self.norm1.forward(&(&q_star + self.out_proj.forward(&flat)?)?)?;
        let obj = self.norm2.forward(&(&h + self.ffn.forward(&h)?)?)?;

        let delta = self.box_out.forward(&self.box_hidden.forward(&obj)?.relu()?)?;
        let wh = boxes.narrow(D::Minus1, 2, 2)?;
        let centre = (boxes.narrow(D::Minus1, 0, 2)? + (delta.narrow(D::Minus1, 0, 2)? * &wh)?)?;
        let scale = delta
            .narrow(D::Minus1, 2, 2)?
            .clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)?
            .exp()?;
        let refined = Tensor::cat(&[centre, (wh * scale)?], D::Minus1)?;
        let xyxy = cxcywh_to_xyxy_t(&refined)?.clamp(0.0, 1.0)?;

        let f_c = match &self.cls_head {
            Some(head) => Some(head.forward(&obj)?),
            None => None,
        };
        Ok((
            StageTensors {
                boxes: xyxy,
                object_features: obj,
                f_c,
                q_star,
            },
            degenerate,
        ))
    }
}

/// Per-stage outputs of a batch forward pass.
#[derive(Debug, Clone)]
pub struct BatchStage {
    /// `[B, N, 4]` normalized xyxy.
    pub boxes: Tensor,
    /// `[B, N, L]` alignment logits (decoder stages only).
    pub logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    /// Proposal stage first, then every decoder stage.
    pub stages: Vec<BatchStage>,
    /// Boxes that hit the minimum-side clamp before pooling.
    pub degenerate_boxes: usize,
    /// Queries fed to the proposal stage after adaptation and interaction.
    pub rpn_q_star: Tensor,
}

impl BatchForward {
    /// Stage outputs of image `b`, ready for the loss.
    pub fn image_stages(&self, b: usize) -> Result<Vec<StageOutput>> {
        self.stages
            .iter()
            .map(|s| {
                Ok(StageOutput {
                    boxes: s.boxes.get(b)?,
                    token_logits: match &s.logits {
                        Some(l) => Some(l.get(b)?),
                        None => None,
                    },
                })
            })
            .collect()
    }
}

/// One detection after top-k selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query: usize,
    /// Category index in the conditioning prompt.
    pub category: usize,
    pub score: f64,
    /// Absolute pixel xyxy.
    pub bbox: Xyxy,
}

/// Inference result for one image.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// `[N_q]` absolute pixel xyxy from the final stage.
    pub boxes: Vec<Xyxy>,
    /// `[N_q, L]` final-stage alignment scores, pads zero.
    pub token_scores: Array2<f64>,
    /// `[N_q, categories]` mean token score over each category span.
    pub category_scores: Array2<f64>,
    pub per_stage_outputs: Vec<StageOutput>,
    pub source_dataset: String,
    pub degenerate_boxes: usize,
}

impl DetectionOutput {
    /// Highest-scoring `(query, category)` pairs, ties broken by index.
    pub fn top_k(&self, k: usize) -> Vec<Detection> {
        let mut all: Vec<Detection> = self
            .category_scores
            .indexed_iter()
            .map(|((q, c), &score)| Detection {
                query: q,
                category: c,
                score,
                bbox: self.boxes[q],
            })
            .collect();
        all.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.query.cmp(&b.query))
                .then(a.category.cmp(&b.category))
        });
        all.truncate(k);
        all
    }
}

/// The query-adapted detector.
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub queries: QuerySet,
    pub proposals: Tensor,
    pub rpn: DecoderStage,
    pub stages: Vec<DecoderStage>,
    pub embed_dim: usize,
}

impl Detector {
    pub fn new(config: &DetectorConfig, embed_dim: usize, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut ps = ParamStore::new(dtype, seed);
        let backbone = Backbone::new(&mut ps, "backbone", m.backbone_width, m.feature_channels)?;
        let queries = QuerySet::new(&mut ps, "queries", config.queries.count, m.d)?;
        let proposals = ps.get_or_init(
            "proposals",
            &[config.queries.count, 4],
            Init::Repeat(&[0.5, 0.5, 1.0, 1.0]),
        )?;
        let rpn = DecoderStage::new(&mut ps, "rpn", config, embed_dim, false)?;
        let stages = (0..m.stages)
            .map(|i| DecoderStage::new(&mut ps, &format!("stage{i}"), config, embed_dim, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            params: ps,
            backbone,
            queries,
            proposals,
            rpn,
            stages,
            embed_dim,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn extract_features(&self, images: &Tensor) -> Result<BackboneFeatures> {
        self.backbone.forward(images)
    }

    /// Proposal stage: learnable whole-image boxes refined once by a
    /// query-adapted dynamic interaction with pooled features.
    pub fn query_rpn(
        &self,
        features: &BackboneFeatures,
        cond: &Conditioning,
    ) -> Result<(ProposalSet, StageTensors, usize)> {
        let b = cond.batch();
        let n = self.queries.count();
        let d = self.config.model.d;
        let q0 = self.queries.q.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let boxes = self.proposals.unsqueeze(0)?.broadcast_as((b, n, 4))?.contiguous()?;
        let emb = self
            .config
            .adaptation
            .adapt_rpn()
            .then_some((&cond.e, cond.valid_lens.as_slice()));
        let (out, degenerate) = self.rpn.forward(features.finest(), &boxes, &q0, emb)?;
        let proposals = ProposalSet {
            boxes: next_stage_boxes(&out.boxes)?,
            object_features: out.object_features.clone(),
        };
        Ok((proposals, out, degenerate))
    }

    /// One decoder stage on the previous stage's proposals.
    pub fn decode_stage(
        &self,
        index: usize,
        features: &BackboneFeatures,
        proposals: &ProposalSet,
        cond: &Conditioning,
    ) -> Result<(ProposalSet, StageTensors, usize)> {
        let stage = self
            .stages
            .get(index)
            .ok_or_else(|| Error::config(format!("no decoder stage {index}")))?;
        let emb = self
            .config
            .adaptation
            .adapt_decoder()
            .then_some((&cond.e, cond.valid_lens.as_slice()));
        let (out, degenerate) = stage.forward(
            features.finest(),
            &proposals.boxes,
            &proposals.object_features,
            emb,
        )?;
        let next = ProposalSet {
            boxes: next_stage_boxes(&out.boxes)?,
            object_features: out.object_features.clone(),
        };
        Ok((next, out, degenerate))
    }

    /// Full forward pass over a batch `images: [B, 3, H, W]`.
    pub fn forward(&self, images: &Tensor, cond: &Conditioning) -> Result<BatchForward> {
        let features = self.extract_features(images)?;
        if features.finest().dims4()?.0 != cond.batch() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} images vs {} conditioning rows",
                    features.finest().dims4()?.0,
                    cond.batch()
                ),
            ));
        }
        let (mut proposals, rpn_out, mut degenerate) = self.query_rpn(&features, cond)?;
        let mut stages = vec![BatchStage {
            boxes: rpn_out.boxes,
            logits: None,
        }];
        for i in 0..self.stages.len() {
            let (next, out, deg) = self.decode_stage(i, &features, &proposals, cond)?;
            degenerate += deg;
            let f_c = out.f_c.as_ref().expect("decoder stages classify");
            stages.push(BatchStage {
                boxes: out.boxes,
                logits: Some(align_logits(f_c, &cond.f_e)?),
            });
            proposals = next;
        }
        Ok(BatchForward {
            stages,
            degenerate_boxes: degenerate,
            rpn_q_star: rpn_out.q_star,
        })
    }

    /// Runs one image `[3, H, W]` under a prompt and pools category scores.
    pub fn predict(
        &self,
        image: &Tensor,
        prompt: &DetectionPrompt,
        embedding: &DatasetEmbedding,
        source_dataset: &str,
    ) -> Result<DetectionOutput> {
        let device = image.device().clone();
        let (_, h, w) = image.dims3()?;
        let cond = Conditioning::new(&[embedding], self.dtype(), &device)?;
        let out = self.forward(&image.unsqueeze(0)?, &cond)?;
        let per_stage = out.image_stages(0)?;
        let last = per_stage.last().expect("at least one stage");
        let logits = last.token_logits.as_ref().expect("final stage classifies");
        let mask = cond.valid_mask.get(0)?;
        let scores = sigmoid(logits)?.broadcast_mul(&mask)?;
        let (nq, l) = scores.dims2()?;
        let token_scores = Array2::from_shape_vec(
            (nq, l),
            scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        )
        .map_err(|e| Error::shape("predict", e.to_string()))?;
        let category_scores = pool_category_scores(&token_scores, prompt);
        let boxes = boxes_to_vec(&last.boxes.unsqueeze(0)?)?
            .remove(0)
            .into_iter()
            .map(|b| [b[0] * w as f64, b[1] * h as f64, b[2] * w as f64, b[3] * h as f64])
            .collect();
        Ok(DetectionOutput {
            boxes,
            token_scores,
            category_scores,
            per_stage_outputs: per_stage,
            source_dataset: source_dataset.to_string(),
            degenerate_boxes: out.degenerate_boxes,
        })
    }
}

/// Converts a stage's clamped xyxy output into the next stage's detached
/// cxcywh input boxes.
fn next_stage_boxes(xyxy: &Tensor) -> Result<Tensor> {
    let (b, n, _) = xyxy.dims3()?;
    let mut lists = boxes_to_vec(&xyxy.detach())?;
    let mut flat = Vec::with_capacity(b * n * 4);
    for list in lists.iter_mut() {
        sanitize_boxes(list);
        for bx in list.iter() {
            flat.extend_from_slice(&xyxy_to_cxcywh_vec(bx));
        }
    }
    Ok(Tensor::from_vec(flat, (b, n, 4), xyxy.device())?.to_dtype(xyxy.dtype())?)
}
