//! Three-stage residual UNet on latents, conditioned on an integer timestep.
//!
//! Stages run at latent resolution `h`, `h/2`, `h/4` with widths `channels[0..3]`.
//! One RTS block follows each of the five stage outputs (two encoder stages,
//! the middle stage, two decoder stages).

use candle_core::{Tensor, D};

use crate::nn::ops::{timestep_embedding, upsample_nearest2};
use crate::nn::{Conv2d, ConvSpec, Fwd, Init, Linear, Module, Param, ParamKind};
use crate::rts::{RtsBlock, RtsConfig};
use crate::tai::{execute, make_plan, ExecMode, Phase, SegState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    pub latent_channels: usize,
    pub channels: [usize; 3],
    pub temb_dim: usize,
    /// Valid timesteps are `1..=steps`.
    pub steps: usize,
    pub lora_rank: Option<usize>,
    pub lora_scale: f64,
    pub rts: Option<RtsConfig>,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { latent_channels: 4, channels: [32, 32, 64], temb_dim: 64, steps: 1000, lora_rank: Some(8), lora_scale: 1.0, rts: Some(RtsConfig::default()) }
    }
}

fn conv(init: &Init, name: &str, spec: ConvSpec, cfg: &UnetConfig) -> Result<Conv2d> {
    let sub = init.sub(name);
    let c = Conv2d::new(&sub, spec)?;
    match cfg.lora_rank {
        Some(r) => c.with_lora(&sub, r, cfg.lora_scale),
        None => Ok(c),
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub temb_proj: Linear,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(init: &Init, c_in: usize, c_out: usize, cfg: &UnetConfig) -> Result<Self> {
        let b = ParamKind::Base;
        Ok(Self {
            conv1: conv(init, "conv1", ConvSpec::new(c_in, c_out, 3, b), cfg)?,
            conv2: conv(init, "conv2", ConvSpec::new(c_out, c_out, 3, b).gain(0.5), cfg)?,
            temb_proj: Linear::new(&init.sub("temb_proj"), cfg.temb_dim, c_out, 1.0, b)?,
            skip: if c_in != c_out { Some(conv(init, "skip", ConvSpec::new(c_in, c_out, 1, b), cfg)?) } else { None },
        })
    }

    /// `temb` is the activated embedding `[1, temb_dim]`.
    fn forward(&self, x: &Tensor, temb: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let c = self.conv1.c_out();
        let t = self.temb_proj.forward(temb)?.reshape((1, c, 1, 1))?;
        let h = self.conv1.forward(&x.silu()?, fwd)?.broadcast_add(&t)?;
        let h = self.conv2.forward(&h.silu()?, fwd)?;
        let s = match &self.skip {
            Some(s) => s.forward(x, fwd)?,
            None => x.clone(),
        };
        let out = (s + h)?;
        fwd.note(&out);
        Ok(out)
    }
}

impl Module for ResBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.temb_proj.visit(f);
        self.skip.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.temb_proj.visit_mut(f);
        self.skip.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Unet {
    pub cfg: UnetConfig,
    pub temb1: Linear,
    pub temb2: Linear,
    pub conv_in: Conv2d,
    pub d1: ResBlock,
    pub down1: Conv2d,
    pub d2: ResBlock,
    pub down2: Conv2d,
    pub mid: ResBlock,
    pub u2: ResBlock,
    pub u1: ResBlock,
    pub conv_out: Conv2d,
    pub rts: Vec<RtsBlock>,
}

pub const UNET_RTS_SITES: usize = 5;

impl Unet {
    pub fn new(init: &Init, cfg: UnetConfig) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let b = ParamKind::Base;
        let te = cfg.temb_dim;
        let rts = match &cfg.rts {
            Some(r) => [c0, c1, c2, c1, c0].iter().enumerate().map(|(i, &c)| RtsBlock::new(&init.sub(&format!("rts{i}")), c, r)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            temb1: Linear::new(&init.sub("temb1"), te, te, 1.0, b)?,
            temb2: Linear::new(&init.sub("temb2"), te, te, 1.0, b)?,
            conv_in: conv(init, "conv_in", ConvSpec::new(cfg.latent_channels, c0, 3, b), &cfg)?,
            d1: ResBlock::new(&init.sub("d1"), c0, c0, &cfg)?,
            down1: conv(init, "down1", ConvSpec::new(c0, c1, 3, b).stride(2), &cfg)?,
            d2: ResBlock::new(&init.sub("d2"), c1, c1, &cfg)?,
            down2: conv(init, "down2", ConvSpec::new(c1, c2, 3, b).stride(2), &cfg)?,
            mid: ResBlock::new(&init.sub("mid"), c2, c2, &cfg)?,
            u2: ResBlock::new(&init.sub("u2"), c2 + c1, c1, &cfg)?,
            u1: ResBlock::new(&init.sub("u1"), c1 + c0, c0, &cfg)?,
            conv_out: conv(init, "conv_out", ConvSpec::new(c0, cfg.latent_channels, 3, b).gain(0.1), &cfg)?,
            rts,
            cfg,
        })
    }

    pub fn has_rts(&self) -> bool {
        !self.rts.is_empty()
    }

    /// Activated timestep embedding, `[1, temb_dim]`.
    pub fn embed(&self, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.cfg.steps {
            return Err(Error::Parameter(format!("timestep {t} outside 1..={}", self.cfg.steps)));
        }
        let w = self.temb1.weight.tensor();
        let e = timestep_embedding(t, self.cfg.temb_dim, w.dtype(), w.device())?;
        Ok(self.temb2.forward(&self.temb1.forward(&e)?.silu()?)?.silu()?)
    }

    /// The network as a phase list over `SegState::x`.
    pub fn phases<'a>(&'a self, t: usize, tag: &str) -> Result<Vec<Phase<'a>>> {
        let te = self.embed(t)?;
        let mut ph = Vec::with_capacity(11);
        let temb = te.clone();
        ph.push(
            Phase::spatial(format!("{tag}.enc1"), move |mut s: SegState, fwd: &Fwd| {
                let h = self.conv_in.forward(&s.x, fwd)?;
                s.x = self.d1.forward(&h, &temb, fwd)?;
                Ok(s)
            })
            .entry(),
        );
        self.push_rts(&mut ph, 0, tag);
        let temb = te.clone();
        ph.push(Phase::spatial(format!("{tag}.enc2"), move |mut s: SegState, fwd: &Fwd| {
            s.skips.push(s.x.clone());
            let h = self.down1.forward(&s.x, fwd)?;
            s.x = self.d2.forward(&h, &temb, fwd)?;
            Ok(s)
        }));
        self.push_rts(&mut ph, 1, tag);
        let temb = te.clone();
        ph.push(Phase::spatial(format!("{tag}.mid"), move |mut s: SegState, fwd: &Fwd| {
            s.skips.push(s.x.clone());
            let h = self.down2.forward(&s.x, fwd)?;
            s.x = self.mid.forward(&h, &temb, fwd)?;
            Ok(s)
        }));
        self.push_rts(&mut ph, 2, tag);
        for (i, (name, block)) in [("dec2", &self.u2), ("dec1", &self.u1)].into_iter().enumerate() {
            let temb = te.clone();
            ph.push(Phase::spatial(format!("{tag}.{name}"), move |mut s: SegState, fwd: &Fwd| {
                let skip = s.skips.pop().ok_or_else(|| Error::Dimension("missing skip".into()))?;
                let up = upsample_nearest2(&s.x)?;
                fwd.note(&up);
                let cat = Tensor::cat(&[&up, &skip], 1)?;
                s.x = block.forward(&cat, &temb, fwd)?;
                Ok(s)
            }));
            self.push_rts(&mut ph, 3 + i, tag);
        }
        ph.push(Phase::spatial(format!("{tag}.out"), move |mut s: SegState, fwd: &Fwd| {
            s.x = self.conv_out.forward(&s.x.silu()?, fwd)?;
            Ok(s)
        }));
        Ok(ph)
    }

    fn push_rts<'a>(&'a self, ph: &mut Vec<Phase<'a>>, i: usize, tag: &str) {
        if let Some(b) = self.rts.get(i) {
            ph.push(Phase::temporal(format!("{tag}.rts{i}"), b));
        }
    }

    /// Full-sequence forward: `est = unet(z, t)` with the same shape as `z`.
    pub fn forward(&self, z: &Tensor, t: usize, fwd: &Fwd) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        if c != self.cfg.latent_channels || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Dimension(format!("unet input {:?} needs {} channels and sides divisible by 4", z.dims(), self.cfg.latent_channels)));
        }
        let phases = self.phases(t, "unet")?;
        let (out, _) = execute(&phases, SegState::new(z.clone()), &make_plan(n, n)?, fwd, ExecMode::Sequential)?;
        Ok(out.x)
    }
}

impl Module for Unet {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.temb1.visit(f);
        self.temb2.visit(f);
        self.conv_in.visit(f);
        self.d1.visit(f);
        self.down1.visit(f);
        self.d2.visit(f);
        self.down2.visit(f);
        self.mid.visit(f);
        self.u2.visit(f);
        self.u1.visit(f);
        self.conv_out.visit(f);
        self.rts.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.temb1.visit_mut(f);
        self.temb2.visit_mut(f);
        self.conv_in.visit_mut(f);
        self.d1.visit_mut(f);
        self.down1.visit_mut(f);
        self.d2.visit_mut(f);
        self.down2.visit_mut(f);
        self.mid.visit_mut(f);
        self.u2.visit_mut(f);
        self.u1.visit_mut(f);
        self.conv_out.visit_mut(f);
        self.rts.visit_mut(f);
    }
}

/// Mean over all but the frame axis, used by tests and diagnostics.
pub fn frame_means(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.mean(D::Minus1)?)
}
