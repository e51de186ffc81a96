//! Deterministic inputs for the benchmarks.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dethub::detector::{Conditioning, Detector, DetectorConfig};
use dethub::losses::CostMatrix;
use dethub::nn::ParamStore;
use dethub::queryhub::{DyConv, KernelShape};
use dethub::taxonomy::{tokenize_prompt, EmbedderSpec};

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn tensor(values: Vec<f32>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).expect("shape matches data")
}

/// Random `num_queries × num_gt` matching costs.
pub fn cost_matrix(num_queries: usize, num_gt: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let costs = Array2::from_shape_simple_fn((num_queries, num_gt), || rng.gen_range(0.0..10.0));
    CostMatrix::from_costs(costs)
}

/// A dynamic filter with `queries` region maps of `side × side × channels`
/// and the adapted queries `[queries, d]` that generate its kernels.
pub fn dyconv_inputs(
    queries: usize,
    side: usize,
    channels: usize,
    kernel: usize,
    d: usize,
) -> dethub::Result<(DyConv, Tensor, Tensor)> {
    let shape = KernelShape {
        k: kernel,
        c_in: channels,
        c_mid: channels / 4,
        c_out: channels,
    };
    let mut ps = ParamStore::new(DType::F32, 1);
    let dc = DyConv::new(&mut ps, "dyconv", d, shape, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = tensor(uniform(&mut rng, queries * side * side * channels), &[queries, side, side, channels]);
    let q = tensor(uniform(&mut rng, queries * d), &[queries, d]);
    Ok((dc, x, q))
}

/// Logits, a sparse binary target and a pad mask for `queries × tokens` scores.
pub fn alignment_inputs(queries: usize, tokens: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = tensor(uniform(&mut rng, queries * tokens), &[queries, tokens]);
    let target: Vec<f32> = (0..queries * tokens)
        .map(|_| f32::from(u8::from(rng.gen_bool(0.02))))
        .collect();
    let valid = tokens * 3 / 4;
    let mask: Vec<f32> = (0..tokens).map(|j| f32::from(u8::from(j < valid))).collect();
    (
        logits,
        tensor(target, &[queries, tokens]),
        tensor(mask, &[1, tokens]),
    )
}

/// A detector with a batch of random images, all conditioned on one prompt.
pub struct DetectorInputs {
    pub detector: Detector,
    pub images: Tensor,
    pub conditioning: Conditioning,
}

pub fn detector_inputs(config: &DetectorConfig, batch: usize) -> dethub::Result<DetectorInputs> {
    let spec = EmbedderSpec::default();
    let detector = Detector::new(config, spec.embed_dim, DType::F32, 4)?;
    let prompt = tokenize_prompt("circle, square, triangle", config.model.max_length)?;
    let embedding = spec.build(config.model.d)?.embed(&prompt)?;
    let conditioning = Conditioning::new(&vec![&embedding; batch], DType::F32, &Device::Cpu)?;
    let s = config.model.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = tensor(uniform(&mut rng, batch * 3 * s * s), &[batch, 3, s, s]);
    Ok(DetectorInputs {
        detector,
        images,
        conditioning,
    })
}
