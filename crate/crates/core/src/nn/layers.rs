use candle_core::Tensor;

use super::params::{Init, Module, Param, ParamKind};
use super::Fwd;
use crate::Result;

/// Low-rank additive weight correction `gamma * (B A)`, reshaped to the wrapped
/// layer's weight. `B` starts at zero so a fresh adapter is an exact no-op.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a: Param,
    pub b: Param,
    pub scale: f64,
}

impl Lora {
    pub fn new(init: &Init, d_out: usize, d_in: usize, rank: usize, scale: f64) -> Result<Self> {
        Ok(Self {
            a: init.normal("lora_a", &[rank, d_in], 1.0 / (d_in as f64).sqrt(), ParamKind::Lora)?,
            b: init.zeros("lora_b", &[d_out, rank], ParamKind::Lora)?,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.var().dims()[0]
    }

    /// `gamma * B A` as a `[d_out, d_in]` matrix.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.tensor().matmul(&self.a.tensor())?.affine(self.scale, 0.0)?)
    }
}

impl Module for Lora {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.a);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.a);
        f(&mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub lora: Option<Lora>,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    /// Multiplier on the fan-in standard deviation; 0 gives a zero-initialised weight.
    pub gain: f64,
    pub kind: ParamKind,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, kind: ParamKind) -> Self {
        Self { c_in, c_out, k, stride: 1, gain: 1.0, kind }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn gain(self, gain: f64) -> Self {
        Self { gain, ..self }
    }
}

impl Conv2d {
    pub fn new(init: &Init, spec: ConvSpec) -> Result<Self> {
        let ConvSpec { c_in, c_out, k, stride, gain, kind } = spec;
        let fan_in = c_in * k * k;
        let shape = [c_out, c_in, k, k];
        let weight = if gain == 0.0 { init.zeros("weight", &shape, kind)? } else { init.normal("weight", &shape, gain / (fan_in as f64).sqrt(), kind)? };
        Ok(Self { weight, bias: init.zeros("bias", &[c_out], kind)?, lora: None, stride, padding: k / 2 })
    }

    /// Attaches a LoRA adapter of the given rank.
    pub fn with_lora(mut self, init: &Init, rank: usize, scale: f64) -> Result<Self> {
        let dims = self.weight.var().dims().to_vec();
        let d_in = dims[1] * dims[2] * dims[3];
        self.lora = Some(Lora::new(init, dims[0], d_in, rank, scale)?);
        Ok(self)
    }

    pub fn c_out(&self) -> usize {
        self.weight.var().dims()[0]
    }

    pub fn effective_weight(&self, fwd: &Fwd) -> Result<Tensor> {
        let w = self.weight.tensor();
        match (&self.lora, fwd.adapters) {
            (Some(l), true) => Ok((&w + l.delta()?.reshape(w.shape())?)?),
            _ => Ok(w),
        }
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let w = self.effective_weight(fwd)?;
        let y = super::ops::conv2d(x, &w, self.padding, self.stride)?;
        let y = y.broadcast_add(&self.bias.tensor().reshape((1, self.c_out(), 1, 1))?)?;
        fwd.note(&y);
        Ok(y)
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
        self.lora.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
        self.lora.visit_mut(f);
    }
}

/// Affine map on the last axis: `x W^T + b`, with `W` of shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(init: &Init, d_in: usize, d_out: usize, gain: f64, kind: ParamKind) -> Result<Self> {
        let weight =
            if gain == 0.0 { init.zeros("weight", &[d_out, d_in], kind)? } else { init.normal("weight", &[d_out, d_in], gain / (d_in as f64).sqrt(), kind)? };
        Ok(Self { weight, bias: init.zeros("bias", &[d_out], kind)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.tensor().t()?)?.broadcast_add(&self.bias.tensor())?)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
