//! Recurrent temporal shift primitives.
//!
//! Frames sit on axis 0 of every feature map. `temporal_shift(f, k)` returns
//! `out[i] = f[i - k]` with zeros where `i - k` leaves the sequence.
//!
//! The convolution unit reduces channels with a 1x1 conv, splits them into
//! three equal segments shifted by `+1, 0, -1`, applies `conv3x3 -> ReLU ->
//! conv3x3`, and expands back with a 1x1 conv added to the input.
//!
//! The attention unit projects to single-head `q, k, v` of width `r` and, for
//! each frame `i`, sums `softmax(q_i k_{i+j}^T / sqrt(r)) v_{i+j}` over
//! `j in {-1, 0, 1}` with zero keys/values outside the sequence, then applies
//! an output projection added to the input.
//!
//! Output projections and the second inner convolution start at zero, so a new
//! block is an exact identity. Each unit widens the temporal receptive field by
//! one frame in each direction, so a block (conv then attention) widens it by two.

use candle_core::Tensor;

use crate::nn::ops::softmax_last;
use crate::nn::{Conv2d, ConvSpec, Fwd, Init, Module, Param, ParamKind};
use crate::{Error, Result};

/// Shift along the frame axis with zero fill. Offsets of any size are accepted.
pub fn temporal_shift(f: &Tensor, offset: i64) -> Result<Tensor> {
    let n = f.dim(0)? as i64;
    if offset == 0 {
        return Ok(f.clone());
    }
    if offset.abs() >= n {
        return Ok(f.zeros_like()?);
    }
    let k = offset.unsigned_abs() as usize;
    let keep = (n - offset.abs()) as usize;
    let mut pad_shape = f.dims().to_vec();
    pad_shape[0] = k;
    let pad = Tensor::zeros(pad_shape, f.dtype(), f.device())?;
    Ok(if offset > 0 { Tensor::cat(&[&pad, &f.narrow(0, 0, keep)?], 0)? } else { Tensor::cat(&[&f.narrow(0, k, keep)?, &pad], 0)? })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtsConfig {
    /// Channel reduction factor of the convolution unit.
    pub channel_ratio: usize,
    /// Explicit inner width; must be divisible by 3. Derived from the ratio when `None`.
    pub inner_channels: Option<usize>,
    /// Attention embedding width `r`.
    pub attn_dim: usize,
}

impl Default for RtsConfig {
    fn default() -> Self {
        Self { channel_ratio: 2, inner_channels: None, attn_dim: 8 }
    }
}

impl RtsConfig {
    pub fn inner_for(&self, channels: usize) -> Result<usize> {
        if self.channel_ratio == 0 {
            return Err(Error::Config("rts.channel_ratio must be >= 1".into()));
        }
        let inner = match self.inner_channels {
            Some(c) => c,
            None => 3 * channels.div_ceil(3 * self.channel_ratio),
        };
        if inner == 0 || inner % 3 != 0 {
            return Err(Error::Config(format!("rts inner channels {inner} must be a positive multiple of 3")));
        }
        Ok(inner)
    }
}

#[derive(Debug, Clone)]
pub struct RtsConvUnit {
    pub reduce: Conv2d,
    pub inner1: Conv2d,
    pub inner2: Conv2d,
    pub expand: Conv2d,
}

impl RtsConvUnit {
    pub fn new(init: &Init, channels: usize, cfg: &RtsConfig) -> Result<Self> {
        let inner = cfg.inner_for(channels)?;
        let k = ParamKind::Rts;
        Ok(Self {
            reduce: Conv2d::new(&init.sub("reduce"), ConvSpec::new(channels, inner, 1, k))?,
            inner1: Conv2d::new(&init.sub("inner1"), ConvSpec::new(inner, inner, 3, k))?,
            inner2: Conv2d::new(&init.sub("inner2"), ConvSpec::new(inner, inner, 3, k).gain(0.0))?,
            expand: Conv2d::new(&init.sub("expand"), ConvSpec::new(inner, channels, 1, k))?,
        })
    }

    pub fn inner_channels(&self) -> usize {
        self.reduce.c_out()
    }

    /// Reduced features with the three segments shifted by `+1, 0, -1`.
    pub fn aggregate(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let f = self.reduce.forward(x, fwd)?;
        let seg = self.inner_channels() / 3;
        let parts = [temporal_shift(&f.narrow(1, 0, seg)?, 1)?, f.narrow(1, seg, seg)?, temporal_shift(&f.narrow(1, 2 * seg, seg)?, -1)?];
        let agg = Tensor::cat(&parts, 1)?;
        fwd.note(&agg);
        Ok(agg)
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let agg = self.aggregate(x, fwd)?;
        let h = self.inner1.forward(&agg, fwd)?.relu()?;
        let h = self.inner2.forward(&h, fwd)?;
        let out = (x + self.expand.forward(&h, fwd)?)?;
        fwd.note(&out);
        Ok(out)
    }
}

impl Module for RtsConvUnit {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.reduce.visit(f);
        self.inner1.visit(f);
        self.inner2.visit(f);
        self.expand.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.reduce.visit_mut(f);
        self.inner1.visit_mut(f);
        self.inner2.visit_mut(f);
        self.expand.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct RtsAttnUnit {
    pub qkv: Conv2d,
    pub out_proj: Conv2d,
    dim: usize,
}

impl RtsAttnUnit {
    pub fn new(init: &Init, channels: usize, cfg: &RtsConfig) -> Result<Self> {
        if cfg.attn_dim == 0 {
            return Err(Error::Config("rts.attn_dim must be >= 1".into()));
        }
        let r = cfg.attn_dim;
        Ok(Self {
            qkv: Conv2d::new(&init.sub("qkv"), ConvSpec::new(channels, 3 * r, 1, ParamKind::Rts))?,
            out_proj: Conv2d::new(&init.sub("out_proj"), ConvSpec::new(r, channels, 1, ParamKind::Rts).gain(0.0))?,
            dim: r,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Attention weights `[frames, hw, hw]` of frame `i` against frame `i + j`.
    pub fn attention_weights(&self, x: &Tensor, j: i64, fwd: &Fwd) -> Result<Tensor> {
        let (q, k, _) = self.project(x, fwd)?;
        self.weights(&q, &temporal_shift(&k, -j)?, fwd)
    }

    /// `q, k, v` as `[frames, hw, r]`.
    fn project(&self, x: &Tensor, fwd: &Fwd) -> Result<(Tensor, Tensor, Tensor)> {
        let (t, _, h, w) = x.dims4()?;
        let r = self.dim;
        let qkv = self.qkv.forward(x, fwd)?;
        let split = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(1, i * r, r)?.reshape((t, r, h * w))?.transpose(1, 2)?.contiguous()?) };
        Ok((split(0)?, split(1)?, split(2)?))
    }

    fn weights(&self, q: &Tensor, k: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let scores = q.matmul(&k.transpose(1, 2)?)?.affine(1.0 / (self.dim as f64).sqrt(), 0.0)?;
        let a = softmax_last(&scores)?;
        fwd.note(&scores);
        fwd.note(&a);
        Ok(a)
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let (t, _, h, w) = x.dims4()?;
        let (q, k, v) = self.project(x, fwd)?;
        let mut acc: Option<Tensor> = None;
        for j in [-1i64, 0, 1] {
            let kj = temporal_shift(&k, -j)?;
            let vj = temporal_shift(&v, -j)?;
            let term = self.weights(&q, &kj, fwd)?.matmul(&vj)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        let msa = acc.expect("three terms").transpose(1, 2)?.reshape((t, self.dim, h, w))?;
        fwd.note(&msa);
        let out = (x + self.out_proj.forward(&msa, fwd)?)?;
        fwd.note(&out);
        Ok(out)
    }
}

impl Module for RtsAttnUnit {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.qkv.visit(f);
        self.out_proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.qkv.visit_mut(f);
        self.out_proj.visit_mut(f);
    }
}

/// Convolution unit followed by attention unit.
#[derive(Debug, Clone)]
pub struct RtsBlock {
    pub conv: RtsConvUnit,
    pub attn: RtsAttnUnit,
}

impl RtsBlock {
    pub fn new(init: &Init, channels: usize, cfg: &RtsConfig) -> Result<Self> {
        Ok(Self { conv: RtsConvUnit::new(&init.sub("conv"), channels, cfg)?, attn: RtsAttnUnit::new(&init.sub("attn"), channels, cfg)? })
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        self.attn.forward(&self.conv.forward(x, fwd)?, fwd)
    }
}

impl Module for RtsBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit(f);
        self.attn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.attn.visit_mut(f);
    }
}
