//! Adam with bias correction and serialisable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::nn::Param;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, steps: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter in `params` that has a gradient.
    pub fn step(&mut self, params: &[&Param], grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for p in params {
            if !p.trainable() {
                continue;
            }
            let Some(g) = grads.get(p.var().as_tensor()) else { continue };
            let g = g.detach();
            let (m, v) = match self.moments.get(p.name()) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?).detach();
            let v = ((v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?).detach();
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            let new = p.var().as_tensor().detach().sub(&update)?;
            p.set(&new)?;
            self.moments.insert(p.name().to_string(), (m, v));
        }
        Ok(())
    }

    /// Named moment tensors (`m.<param>`, `v.<param>`) for checkpointing.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((format!("m.{name}"), m.clone()));
            out.push((format!("v.{name}"), v.clone()));
        }
        out
    }

    pub fn from_records(cfg: AdamConfig, steps: u64, records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for (name, t) in records {
            if let Some(n) = name.strip_prefix("m.") {
                ms.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("v.") {
                vs.insert(n.to_string(), t);
            } else {
                return Err(Error::checkpoint(name, "optimizer record must start with m. or v."));
            }
        }
        let mut moments = BTreeMap::new();
        for (n, m) in ms {
            let v = vs.remove(&n).ok_or_else(|| Error::checkpoint(format!("v.{n}"), "missing second moment"))?;
            moments.insert(n, (m, v));
        }
        if let Some(n) = vs.keys().next() {
            return Err(Error::checkpoint(format!("m.{n}"), "missing first moment"));
        }
        Ok(Self { cfg, steps, moments })
    }
}
