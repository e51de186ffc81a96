//! Minimal parameter store and layers over `candle_core` tensors.
//!
//! Parameters are initialized from a seeded ChaCha stream so that a model is a
//! pure function of its configuration and seed.

mod layers;
pub mod ops;

pub use layers::{Conv2d, LayerNorm, Linear, Mlp};

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    /// Uniform(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize, gain: f64 },
    Values(&'static [f64]),
    /// Tiles the pattern along the last axis.
    Repeat(&'static [f64]),
}

/// Named trainable parameters, in a stable (sorted) order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::XavierUniform {
                fan_in,
                fan_out,
                gain,
            } => {
                let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::shape(
                        "param init",
                        format!("{name}: {} values for shape {shape:?}", v.len()),
                    ));
                }
                v.to_vec()
            }
            Init::Repeat(v) => {
                if v.is_empty() || n % v.len() != 0 {
                    return Err(Error::shape(
                        "param init",
                        format!("{name}: pattern of {} does not tile {shape:?}", v.len()),
                    ));
                }
                v.iter().copied().cycle().take(n).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites one parameter in place (shape must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::data(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(
                "param set",
                format!("{name}: {:?} vs {:?}", var.dims(), value.dims()),
            ));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads every parameter from a safetensors file; names and shapes must match.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::data(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Hash over all parameter bit patterns in name order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for v in flat.to_vec1::<f64>()? {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
