use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Backbone weight; frozen in frozen-base mode.
    Base,
    Lora,
    Rts,
    /// Training-only networks (discriminators, feature extractors).
    Aux,
}

/// A named learnable tensor. Frozen parameters hand out detached tensors so
/// autograd never records a path back to them.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    var: Var,
    kind: ParamKind,
    trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<Self> {
        Ok(Self { name: name.into(), var: Var::from_tensor(&tensor)?, kind, trainable: true })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    /// Tensor for use in a forward pass.
    pub fn tensor(&self) -> Tensor {
        if self.trainable {
            self.var.as_tensor().clone()
        } else {
            self.var.as_detached_tensor()
        }
    }

    /// Replaces the value, keeping shape and dtype.
    pub fn set(&self, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.var.dtype())?;
        Ok(self.var.set(&value)?)
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }
}

/// Visitor over the parameters of a network, in a fixed order.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn trainable_params(&self) -> Vec<&Param> {
        self.params().into_iter().filter(|p| p.trainable()).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.elem_count()).sum()
    }

    /// Sets each parameter's trainable flag from `rule`.
    fn set_trainable_by(&mut self, rule: &dyn Fn(&Param) -> bool) {
        self.visit_mut(&mut |p| {
            let on = rule(p);
            p.set_trainable(on);
        });
    }
}

impl<M: Module> Module for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for m in self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

/// Parameter factory. Each parameter's random stream is derived from the seed
/// and its full name, so values do not depend on construction order.
#[derive(Debug, Clone)]
pub struct Init {
    seed: u64,
    dtype: DType,
    device: Device,
    prefix: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { seed, dtype, device: Device::Cpu, prefix: String::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A child factory whose parameter names are prefixed by `name.`.
    pub fn sub(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Self { prefix, ..self.clone() }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64, kind: ParamKind) -> Result<Param> {
        let full = self.full_name(name);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(full.as_bytes()));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Param::new(full, t, kind)
    }

    pub fn zeros(&self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Param> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        Param::new(self.full_name(name), t, kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent_and_named() {
        let init = Init::new(3, DType::F32).sub("enc");
        let a = init.normal("w", &[4, 4], 1.0, ParamKind::Base).unwrap();
        let _ = init.normal("other", &[2], 1.0, ParamKind::Base).unwrap();
        let b = init.normal("w", &[4, 4], 1.0, ParamKind::Base).unwrap();
        assert_eq!(a.name(), "enc.w");
        let diff = (a.tensor() - b.tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn frozen_param_is_detached() {
        let mut p = Init::new(0, DType::F32).normal("w", &[3], 1.0, ParamKind::Base).unwrap();
        p.set_trainable(false);
        let loss = p.tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(p.var().as_tensor()).is_none());
    }
}
