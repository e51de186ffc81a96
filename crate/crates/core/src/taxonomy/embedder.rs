use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{fnv1a, DetectionPrompt, TOKENIZER_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    DeterministicStub,
    ExternalPretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub embed_dim: usize,
    pub seed: u64,
    /// Stub only: no positional signal and no token mixing, so each token's
    /// embedding depends on its string alone.
    pub context_free: bool,
    /// External only: directory of precomputed embeddings.
    pub cache_dir: Option<PathBuf>,
    /// External only: identifier of the model that produced the cache.
    pub external_id: Option<String>,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::DeterministicStub,
            embed_dim: 64,
            seed: 0,
            context_free: false,
            cache_dir: None,
            external_id: None,
        }
    }
}

impl EmbedderSpec {
    /// Identifier recorded in checkpoints; evaluation refuses a different one.
    pub fn id(&self) -> String {
        match self.kind {
            EmbedderKind::DeterministicStub => format!(
                "stub-v1:dim={}:seed={}:{}",
                self.embed_dim,
                self.seed,
                if self.context_free { "ctxfree" } else { "ctx" }
            ),
            EmbedderKind::ExternalPretrained => format!(
                "external:{}:dim={}",
                self.external_id.as_deref().unwrap_or("unnamed"),
                self.embed_dim
            ),
        }
    }

    pub fn build(&self, d: usize) -> Result<Box<dyn LanguageEmbedder>> {
        if self.embed_dim == 0 || d == 0 {
            return Err(Error::config("embedder dimensions must be positive"));
        }
        match self.kind {
            EmbedderKind::DeterministicStub => Ok(Box::new(StubEmbedder::new(self, d))),
            EmbedderKind::ExternalPretrained => {
                let dir = self.cache_dir.clone().ok_or_else(|| {
                    Error::config("external-pretrained embedder requires `embedder.cache_dir`")
                })?;
                Ok(Box::new(PrecomputedEmbedder::new(dir, self.id(), self.embed_dim, d)))
            }
        }
    }
}

/// Frozen language embedding of one prompt.
///
/// `e` is the token embedding consumed by the query hub; `f_e` the contextual
/// language features in the shared visual-language space. Pad rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEmbedding {
    pub e: Array2<f64>,
    pub f_e: Array2<f64>,
    pub valid_len: usize,
    pub embedder_id: String,
}

impl DatasetEmbedding {
    pub fn token_count(&self) -> usize {
        self.e.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.f_e.ncols()
    }

    /// Hash of the exact bit patterns of both matrices.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.e.iter().chain(self.f_e.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub trait LanguageEmbedder: Send + Sync {
    fn id(&self) -> String;
    /// Dimension of `f_e`.
    fn feature_dim(&self) -> usize;
    fn embed(&self, prompt: &DetectionPrompt) -> Result<DatasetEmbedding>;
    /// Hash over every frozen parameter the embedder holds.
    fn fingerprint(&self) -> String;
}

/// Embeds a prompt and checks the output against the configured projection width `d`.
pub fn embed_prompt(
    prompt: &DetectionPrompt,
    spec: &EmbedderSpec,
    d: usize,
) -> Result<DatasetEmbedding> {
    let embedder = spec.build(d)?;
    let out = embedder.embed(prompt)?;
    if out.feature_dim() != d || out.embed_dim() != spec.embed_dim {
        return Err(Error::config(format!(
            "embedder `{}` produced dims (e={}, f_e={}), configured (e={}, d={})",
            embedder.id(),
            out.embed_dim(),
            out.feature_dim(),
            spec.embed_dim,
            d
        )));
    }
    Ok(out)
}

/// Seeded stand-in for a pre-trained text encoder.
///
/// Each token string hashes to a Gaussian vector; unless `context_free`, a
/// sinusoidal position code is added and one fixed self-attention layer mixes
/// the valid tokens. All weights are drawn once from the seed and never change.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    spec: EmbedderSpec,
    d: usize,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_proj: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

impl StubEmbedder {
    pub fn new(spec: &EmbedderSpec, d: usize) -> Self {
        let n = spec.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_e3be_dde7_0000);
        let scale = 1.0 / (n as f64).sqrt();
        Self {
            spec: spec.clone(),
            d,
            w_q: gaussian(&mut rng, n, n, scale),
            w_k: gaussian(&mut rng, n, n, scale),
            w_v: gaussian(&mut rng, n, n, scale),
            w_proj: gaussian(&mut rng, n, d, scale),
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.spec.seed);
        (0..self.spec.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl LanguageEmbedder for StubEmbedder {
    fn id(&self) -> String {
        self.spec.id()
    }

    fn feature_dim(&self) -> usize {
        self.d
    }

    fn embed(&self, prompt: &DetectionPrompt) -> Result<DatasetEmbedding> {
        let n = self.spec.embed_dim;
        let len = prompt.token_count();
        let valid = prompt.valid_len;
        let mut e = Array2::<f64>::zeros((len, n));
        for (i, tok) in prompt.tokens.iter().take(valid).enumerate() {
            let v = self.token_vector(tok);
            for (j, x) in v.into_iter().enumerate() {
                let pos = if self.spec.context_free {
                    0.0
                } else {
                    let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / n as f64);
                    let angle = i as f64 * freq;
                    0.5 * if j % 2 == 0 { angle.sin() } else { angle.cos() }
                };
                e[[i, j]] = x + pos;
            }
        }

        let valid_e = e.slice(s![..valid, ..]);
        let context = if self.spec.context_free || valid == 0 {
            valid_e.to_owned()
        } else {
            let q = valid_e.dot(&self.w_q);
            let k = valid_e.dot(&self.w_k);
            let v = valid_e.dot(&self.w_v);
            let mut logits = q.dot(&k.t()) / (n as f64).sqrt();
            for mut row in logits.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|x| (x - m).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            &valid_e + &logits.dot(&v)
        };
        let projected = context.dot(&self.w_proj);
        let mut f_e = Array2::<f64>::zeros((len, self.d));
        f_e.slice_mut(s![..valid, ..]).assign(&projected);

        Ok(DatasetEmbedding {
            e,
            f_e,
            valid_len: valid,
            embedder_id: self.id(),
        })
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id().as_bytes());
        for m in [&self.w_q, &self.w_k, &self.w_v, &self.w_proj] {
            for v in m.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Content-addressed cache key: (tokenizer id, prompt hash, embedder id).
pub fn cache_key(prompt: &DetectionPrompt, embedder_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(TOKENIZER_ID.as_bytes());
    h.update([0u8]);
    h.update(prompt.content_hash().as_bytes());
    h.update([0u8]);
    h.update(embedder_id.as_bytes());
    hex::encode(&h.finalize()[..16])
}

fn cache_path(dir: &Path, prompt: &DetectionPrompt, embedder_id: &str) -> PathBuf {
    dir.join(format!("{}.safetensors", cache_key(prompt, embedder_id)))
}

fn write_embedding(path: &Path, emb: &DatasetEmbedding) -> Result<()> {
    let to_tensor = |m: &Array2<f64>| {
        Tensor::from_iter(m.iter().copied(), &Device::Cpu)?.reshape(m.dim())
    };
    let mut map = HashMap::new();
    map.insert("E".to_string(), to_tensor(&emb.e)?);
    map.insert("F_E".to_string(), to_tensor(&emb.f_e)?);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

fn read_embedding(path: &Path, valid_len: usize, id: &str) -> Result<DatasetEmbedding> {
    let map = candle_core::safetensors::load(path, &Device::Cpu)?;
    let get = |name: &str| -> Result<Array2<f64>> {
        let t = map
            .get(name)
            .ok_or_else(|| Error::data(format!("{} lacks tensor `{name}`", path.display())))?
            .to_dtype(candle_core::DType::F64)?;
        let (r, c) = t.dims2()?;
        let v = t.flatten_all()?.to_vec1::<f64>()?;
        Array2::from_shape_vec((r, c), v).map_err(|e| Error::data(e.to_string()))
    };
    Ok(DatasetEmbedding {
        e: get("E")?,
        f_e: get("F_E")?,
        valid_len,
        embedder_id: id.to_string(),
    })
}

/// Adapter for an external pre-trained encoder whose outputs were written to
/// a cache directory ahead of time (one safetensors file per prompt, tensors
/// `E` and `F_E`). Reading a frozen file keeps the embedding bit-exact.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    dir: PathBuf,
    id: String,
    embed_dim: usize,
    d: usize,
}

impl PrecomputedEmbedder {
    pub fn new(dir: PathBuf, id: String, embed_dim: usize, d: usize) -> Self {
        Self {
            dir,
            id,
            embed_dim,
            d,
        }
    }

    pub fn path_for(&self, prompt: &DetectionPrompt) -> PathBuf {
        cache_path(&self.dir, prompt, &self.id)
    }
}

impl LanguageEmbedder for PrecomputedEmbedder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn feature_dim(&self) -> usize {
        self.d
    }

    fn embed(&self, prompt: &DetectionPrompt) -> Result<DatasetEmbedding> {
        let path = self.path_for(prompt);
        if !path.exists() {
            return Err(Error::data(format!(
                "no precomputed embedding for prompt at {}",
                path.display()
            )));
        }
        let emb = read_embedding(&path, prompt.valid_len, &self.id)?;
        if emb.token_count() != prompt.token_count() || emb.embed_dim() != self.embed_dim {
            return Err(Error::config(format!(
                "precomputed embedding {} has shape {:?}, expected [{}, {}]",
                path.display(),
                emb.e.dim(),
                prompt.token_count(),
                self.embed_dim
            )));
        }
        Ok(emb)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update(self.dir.to_string_lossy().as_bytes());
        hex::encode(h.finalize())
    }
}

/// Wraps any embedder with an on-disk content-addressed cache.
pub struct CachedEmbedder<E> {
    inner: E,
    dir: PathBuf,
}

impl<E: LanguageEmbedder> CachedEmbedder<E> {
    pub fn new(inner: E, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl<E: LanguageEmbedder> LanguageEmbedder for CachedEmbedder<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn embed(&self, prompt: &DetectionPrompt) -> Result<DatasetEmbedding> {
        let id = self.inner.id();
        let path = cache_path(&self.dir, prompt, &id);
        if path.exists() {
            return read_embedding(&path, prompt.valid_len, &id);
        }
        let emb = self.inner.embed(prompt)?;
        write_embedding(&path, &emb)?;
        Ok(emb)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}
