//! Query adaptation on dataset embeddings and query-conditioned dynamic convolution.
//!
//! Learnable object queries attend to a dataset's frozen language embedding
//! (cross-attention), interact with each other (multi-head self-attention),
//! and are turned into per-query convolution kernels by linear layers. The two
//! generated kernels form a bottleneck applied to region features.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{softmax_last, MASK_NEG};
use crate::nn::{Init, LayerNorm, Linear, Mlp, ParamStore};

/// Learnable object queries `[N_q, d]` shared across datasets.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub q: Tensor,
}

impl QuerySet {
    pub fn new(ps: &mut ParamStore, name: &str, count: usize, d: usize) -> Result<Self> {
        Ok(Self {
            q: ps.get_or_init(name, &[count, d], Init::Normal { std: 1.0 })?,
        })
    }

    pub fn count(&self) -> usize {
        self.q.dims()[0]
    }
}

/// Queries after adaptation to one dataset (`q_prime`) and after
/// self-interaction (`q_star`).
#[derive(Debug, Clone)]
pub struct AdaptedQuerySet {
    pub q_prime: Tensor,
    pub q_star: Tensor,
    pub source_dataset: String,
}

/// Builds the additive key mask `[B, 1, 1, L]` from per-row valid lengths.
pub fn key_padding_bias(
    valid_lens: &[usize],
    token_count: usize,
    dtype: DType,
) -> Result<Tensor> {
    let mut v = Vec::with_capacity(valid_lens.len() * token_count);
    for &n in valid_lens {
        v.extend((0..token_count).map(|j| if j < n { 0.0 } else { MASK_NEG }));
    }
    Ok(Tensor::from_vec(v, (valid_lens.len(), 1, 1, token_count), &candle_core::Device::Cpu)?
        .to_dtype(dtype)?)
}

/// Standard multi-head attention; queries from one sequence, keys and values
/// from another.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            w_q: Linear::new(ps, &format!("{name}.q"), d, d, true)?,
            w_k: Linear::new(ps, &format!("{name}.k"), kv_dim, d, true)?,
            w_v: Linear::new(ps, &format!("{name}.v"), kv_dim, d, true)?,
            w_o: Linear::new(ps, &format!("{name}.o"), d, d, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x: [B, N, d]`, `kv: [B, L, kv_dim]`, optional `key_bias: [B, 1, 1, L]`.
    pub fn forward(&self, x: &Tensor, kv: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let q = self.split_heads(&self.w_q.forward(x)?)?;
        let k = self.split_heads(&self.w_k.forward(kv)?)?;
        let v = self.split_heads(&self.w_v.forward(kv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = key_bias {
            logits = logits.broadcast_add(bias)?;
        }
        let attn = softmax_last(&logits)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.w_o.forward(&out)
    }
}

/// `hub_adapt`: cross-attention of the queries onto a dataset embedding.
///
/// `q: [B, N, d]`, `e: [B, L, embed_dim]`. Fails when no token is valid.
pub fn hub_adapt(
    hub: &MultiHeadAttention,
    q: &Tensor,
    e: &Tensor,
    valid_lens: &[usize],
) -> Result<Tensor> {
    let (_, token_count, _) = e.dims3()?;
    if token_count == 0 || valid_lens.iter().any(|&n| n == 0) {
        return Err(Error::data("empty dataset embedding"));
    }
    let bias = key_padding_bias(valid_lens, token_count, e.dtype())?;
    hub.forward(q, e, Some(&bias))
}

/// Query self-interaction: pre-norm multi-head self-attention and a
/// feed-forward block, each with a residual connection.
#[derive(Debug, Clone)]
pub struct Interaction {
    norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
    /// Restricts self-attention to the diagonal so that every query is
    /// processed independently of the others.
    pub isolate_queries: bool,
}

impl Interaction {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(ps, &format!("{name}.norm_attn"), d)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, d, heads)?,
            norm_ffn: LayerNorm::new(ps, &format!("{name}.norm_ffn"), d)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), d, 2 * d)?,
            isolate_queries: false,
        })
    }

    /// Residual self-attention sub-block only.
    pub fn attend(&self, q_prime: &Tensor) -> Result<Tensor> {
        let h = self.norm_attn.forward(q_prime)?;
        let bias = if self.isolate_queries {
            let n = q_prime.dims3()?.1;
            let v: Vec<f64> = (0..n * n)
                .map(|k| if k / n == k % n { 0.0 } else { MASK_NEG })
                .collect();
            Some(Tensor::from_vec(v, (1, 1, n, n), q_prime.device())?.to_dtype(q_prime.dtype())?)
        } else {
            None
        };
        Ok((q_prime + self.attn.forward(&h, &h, bias.as_ref())?)?)
    }

    /// `interact`: `Q* = FFN-block(SelfAttn-block(Q'))`, shape preserved.
    pub fn forward(&self, q_prime: &Tensor) -> Result<Tensor> {
        let x = self.attend(q_prime)?;
        Ok((&x + self.ffn.forward(&self.norm_ffn.forward(&x)?)?)?)
    }
}

/// Hub cross-attention followed by interaction, with the hub optional so
/// that ablations can run on dataset-independent queries.
#[derive(Debug, Clone)]
pub struct QueryAdapter {
    norm: LayerNorm,
    pub hub: MultiHeadAttention,
    pub interaction: Interaction,
}

impl QueryAdapter {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        embed_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d)?,
            hub: MultiHeadAttention::new(ps, &format!("{name}.hub"), d, embed_dim, heads)?,
            interaction: Interaction::new(ps, &format!("{name}.interact"), d, heads)?,
        })
    }

    /// With `embedding = Some((E, valid_lens))`: `Q' = Q + hub(LN(Q), E)`,
    /// else `Q' = Q`. Returns `(Q', Q*)`.
    pub fn forward(
        &self,
        q: &Tensor,
        embedding: Option<(&Tensor, &[usize])>,
    ) -> Result<(Tensor, Tensor)> {
        let q_prime = match embedding {
            Some((e, valid)) => (q + hub_adapt(&self.hub, &self.norm.forward(q)?, e, valid)?)?,
            None => q.clone(),
        };
        let q_star = self.interaction.forward(&q_prime)?;
        Ok((q_prime, q_star))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelShape {
    pub k: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
}

impl KernelShape {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::config(format!(
                "dynamic kernel size must be odd and >= 1, got {}",
                self.k
            )));
        }
        if self.c_mid == 0 || self.c_mid >= self.c_in.min(self.c_out) {
            return Err(Error::config(format!(
                "bottleneck channels {} must be in [1, min(c_in={}, c_out={}))",
                self.c_mid, self.c_in, self.c_out
            )));
        }
        Ok(())
    }

    pub fn k1_len(&self) -> usize {
        self.k * self.k * self.c_in * self.c_mid
    }

    pub fn k2_len(&self) -> usize {
        self.k * self.k * self.c_mid * self.c_out
    }

    /// Numbers generated per query.
    pub fn flat_len(&self) -> usize {
        self.k1_len() + self.k2_len()
    }
}

/// Generated kernels for a batch of `M` queries.
///
/// `k1: [M, k*k*c_in, c_mid]` and `k2: [M, k*k*c_mid, c_out]`; rows are laid
/// out as `(dy, dx, channel)` so a `[k, k, c_in, c_mid]` kernel is a reshape away.
#[derive(Debug, Clone)]
pub struct DynamicKernels {
    pub k1: Tensor,
    pub k2: Tensor,
    pub shape: KernelShape,
}

/// One query's kernel pair as plain arrays (`[k][k][c_in][c_mid]` and
/// `[k][k][c_mid][c_out]`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicKernel {
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    pub shape: KernelShape,
}

impl DynamicKernels {
    pub fn query(&self, i: usize) -> Result<DynamicKernel> {
        let flat = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(i)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        Ok(DynamicKernel {
            k1: flat(&self.k1)?,
            k2: flat(&self.k2)?,
            shape: self.shape,
        })
    }
}

/// `K(Q*) = Linear(Q*)`: two shared linear maps from each query row to its
/// flattened kernels.
#[derive(Debug, Clone)]
pub struct KernelGenerator {
    to_k1: Linear,
    to_k2: Linear,
    pub shape: KernelShape,
}

impl KernelGenerator {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, shape: KernelShape) -> Result<Self> {
        shape.validate()?;
        let std1 = 1.0 / ((d * shape.k * shape.k * shape.c_in) as f64).sqrt();
        let std2 = 1.0 / ((d * shape.k * shape.k * shape.c_mid) as f64).sqrt();
        Ok(Self {
            to_k1: Linear::with_init(
                ps,
                &format!("{name}.k1"),
                d,
                shape.k1_len(),
                true,
                Init::Normal { std: std1 },
            )?,
            to_k2: Linear::with_init(
                ps,
                &format!("{name}.k2"),
                d,
                shape.k2_len(),
                true,
                Init::Normal { std: std2 },
            )?,
            shape,
        })
    }

    /// `q_star: [M, d]` -> kernels for each of the `M` rows.
    pub fn generate(&self, q_star: &Tensor) -> Result<DynamicKernels> {
        let m = q_star.dims2()?.0;
        let s = self.shape;
        Ok(DynamicKernels {
            k1: self
                .to_k1
                .forward(q_star)?
                .reshape((m, s.k * s.k * s.c_in, s.c_mid))?,
            k2: self
                .to_k2
                .forward(q_star)?
                .reshape((m, s.k * s.k * s.c_mid, s.c_out))?,
            shape: s,
        })
    }
}

/// Same-padded per-sample convolution via im2col.
///
/// `x: [M, H, W, C]`, `kernel: [M, k*k*C, C']` -> `[M, H, W, C']`.
pub fn conv_same(x: &Tensor, kernel: &Tensor, k: usize) -> Result<Tensor> {
    let (m, h, w, c) = x.dims4()?;
    let (km, rows, c_out) = kernel.dims3()?;
    if km != m || rows != k * k * c {
        return Err(Error::shape(
            "conv_same",
            format!("input [{m},{h},{w},{c}] vs kernel [{km},{rows},{c_out}] with k={k}"),
        ));
    }
    let pad = k / 2;
    let cols = if k == 1 {
        x.reshape((m, h * w, c))?
    } else {
        let padded = x.pad_with_zeros(1, pad, pad)?.pad_with_zeros(2, pad, pad)?;
        let mut taps = Vec::with_capacity(k * k);
        for dy in 0..k {
            for dx in 0..k {
                taps.push(padded.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        Tensor::cat(&taps, D::Minus1)?.reshape((m, h * w, k * k * c))?
    };
    Ok(cols.matmul(kernel)?.reshape((m, h, w, c_out))?)
}

/// The query-adapted bottleneck `Conv(K2, act(norm(Conv(K1, X))))`.
///
/// In linear test mode the normalization and activation are identities and
/// the operation is exactly two stacked convolutions.
#[derive(Debug, Clone)]
pub struct DyConv {
    pub generator: KernelGenerator,
    gn_gamma: Tensor,
    gn_beta: Tensor,
    groups: usize,
    pub linear_test_mode: bool,
}

impl DyConv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        shape: KernelShape,
        linear_test_mode: bool,
    ) -> Result<Self> {
        let groups = [4, 2, 1]
            .into_iter()
            .find(|g| shape.c_mid % g == 0)
            .unwrap_or(1);
        Ok(Self {
            generator: KernelGenerator::new(ps, &format!("{name}.gen"), d, shape)?,
            gn_gamma: ps.get_or_init(&format!("{name}.gn.gamma"), &[shape.c_mid], Init::Ones)?,
            gn_beta: ps.get_or_init(&format!("{name}.gn.beta"), &[shape.c_mid], Init::Zeros)?,
            groups,
            linear_test_mode,
        })
    }

    fn group_norm(&self, x: &Tensor) -> Result<Tensor> {
        let (m, h, w, c) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((m, h * w, g, c / g))?;
        let mean = xg.mean_keepdim(3)?.mean_keepdim(1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .reshape((m, h, w, c))?;
        Ok(normed
            .broadcast_mul(&self.gn_gamma)?
            .broadcast_add(&self.gn_beta)?)
    }

    /// `x: [M, H, W, c_in]` with kernels already generated for the `M` queries.
    pub fn apply(&self, x: &Tensor, kernels: &DynamicKernels) -> Result<Tensor> {
        let s = kernels.shape;
        let c = x.dims4()?.3;
        if c != s.c_in {
            return Err(Error::shape(
                "dyconv K1",
                format!("input has {c} channels, kernel expects {}", s.c_in),
            ));
        }
        let mid = conv_same(x, &kernels.k1, s.k)?;
        let mid = if self.linear_test_mode {
            mid
        } else {
            self.group_norm(&mid)?.relu()?
        };
        conv_same(&mid, &kernels.k2, s.k)
    }

    /// Generates kernels from `q_star: [M, d]` and applies them.
    pub fn forward(&self, x: &Tensor, q_star: &Tensor) -> Result<Tensor> {
        let kernels = self.generator.generate(q_star)?;
        self.apply(x, &kernels)
    }
}
