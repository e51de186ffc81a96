use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use super::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Step learning-rate schedule: `base · gamma^(milestones passed)`.
///
/// Milestone fraction `m` of an `n`-step budget takes effect from step
/// `round(m · n)` (0-based) onwards.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub gamma: f64,
    pub milestone_steps: Vec<usize>,
}

impl LrSchedule {
    pub fn new(config: &OptimizerConfig, total_steps: usize) -> Self {
        Self {
            base: config.lr,
            gamma: config.gamma,
            milestone_steps: config
                .milestones
                .iter()
                .map(|m| (m * total_steps as f64).round() as usize)
                .collect(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestone_steps.iter().filter(|&&m| step >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }

    pub fn is_milestone(&self, step: usize) -> bool {
        self.milestone_steps.contains(&step)
    }
}

/// Adam with decoupled weight decay over every parameter of a [`ParamStore`].
///
/// Moments share the parameter dtype.
pub struct AdamW {
    config: OptimizerConfig,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(config: &OptimizerConfig) -> Self {
        Self {
            config: config.clone(),
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let norm = Self::grad_norm(params, grads)?;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        let c = &self.config;
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry the forward graph; detaching keeps the moments from
            // holding every step's graph alive.
            let g = (g.detach() * clip)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * c.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        map.insert(
            "t".into(),
            Tensor::new(&[self.t as f64], &candle_core::Device::Cpu)?,
        );
        let map: HashMap<String, Tensor> = map.into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
        self.m.clear();
        self.v.clear();
        self.t = 0;
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t);
            } else if k == "t" {
                self.t = t.to_vec1::<f64>()?[0] as u64;
            } else {
                return Err(Error::data(format!("unexpected optimizer entry `{k}`")));
            }
        }
        Ok(())
    }
}
