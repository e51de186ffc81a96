//! Helpers shared by the integration test targets: numeric utilities,
//! independent reference implementations, toy configurations and the
//! acceptance checks.

#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dethub::data::{synth_conflict_datasets, LoadedDataset, SynthSpec};
use dethub::engine::TrainConfig;

/// Result of one acceptance check.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).expect("shape matches data")
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1::<f64>())
        .expect("tensor converts to f64")
}

/// Central finite difference of a scalar function at `x` for the chosen coordinates.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Small detector used by the training tests; a few hundred steps run in seconds.
pub const TINY_TOML: &str = r#"
[model]
d = 16
heads = 2
stages = 2
backbone_width = 4
feature_channels = 8
pool_size = 3
image_size = 32
max_length = 32
top_k = 20
[queries]
count = 8
[optimizer]
lr = 1e-3
[train]
steps = 50
batch_size = 2
metrics_every = 10
"#;

/// Detector of the joint-training comparison.
pub const TOY_TOML: &str = r#"
[model]
d = 32
heads = 4
stages = 2
backbone_width = 8
feature_channels = 16
image_size = 64
max_length = 16
[queries]
count = 16
[optimizer]
lr = 1e-3
[train]
steps = 2000
batch_size = 4
"#;

pub fn tiny_config(overrides: &[&str]) -> TrainConfig {
    TrainConfig::from_toml_str(TINY_TOML)
        .and_then(|c| c.with_overrides(overrides))
        .expect("tiny config is valid")
}

pub fn toy_config(overrides: &[&str]) -> TrainConfig {
    TrainConfig::from_toml_str(TOY_TOML)
        .and_then(|c| c.with_overrides(overrides))
        .expect("toy config is valid")
}

/// Synthetic conflict family resized to `image_size`, optionally restricted
/// to the datasets in `only`.
pub fn synth_datasets(
    count: usize,
    images: usize,
    seed: u64,
    image_size: usize,
    only: &[&str],
) -> Vec<LoadedDataset> {
    synth_conflict_datasets(&SynthSpec::with_datasets(count, images), seed)
        .expect("synthetic spec is valid")
        .iter()
        .filter(|d| only.is_empty() || only.contains(&d.vocabulary.dataset_name.as_str()))
        .map(|d| LoadedDataset::from_synth(d, image_size as u32))
        .collect::<dethub::Result<_>>()
        .expect("synthetic images convert")
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
