//! Small convolutional autoencoder with spatial factor 4.
//!
//! The encoder starts with a pixel unshuffle, so images at `H x W` map to
//! latents at `H/4 x W/4`. The decoder carries one RTS block per resolution.

use candle_core::Tensor;

use crate::nn::ops::{pixel_shuffle, pixel_unshuffle, upsample_nearest2};
use crate::nn::{Conv2d, ConvSpec, Fwd, Init, Module, Param, ParamKind};
use crate::rts::{RtsBlock, RtsConfig};
use crate::schedule::{LatentRole, LatentState};
use crate::tai::{execute, make_plan, ExecMode, Phase, SegState};
use crate::videodata::VideoTensor;
use crate::{Error, Result};

pub const VAE_DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub lora_rank: Option<usize>,
    pub lora_scale: f64,
    pub rts: Option<RtsConfig>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_channels: 4, width: 32, lora_rank: Some(8), lora_scale: 1.0, rts: Some(RtsConfig::default()) }
    }
}

/// `x + conv2(silu(conv1(silu(x))))`.
#[derive(Debug, Clone)]
pub struct Res {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Res {
    fn new(init: &Init, c: usize, lora: Option<(usize, f64)>) -> Result<Self> {
        Ok(Self {
            conv1: conv(&init.sub("conv1"), ConvSpec::new(c, c, 3, ParamKind::Base), lora)?,
            conv2: conv(&init.sub("conv2"), ConvSpec::new(c, c, 3, ParamKind::Base).gain(0.5), lora)?,
        })
    }

    fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?, fwd)?;
        let y = (x + self.conv2.forward(&h.silu()?, fwd)?)?;
        fwd.note(&y);
        Ok(y)
    }
}

impl Module for Res {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

fn conv(init: &Init, spec: ConvSpec, lora: Option<(usize, f64)>) -> Result<Conv2d> {
    let c = Conv2d::new(init, spec)?;
    match lora {
        Some((r, scale)) => c.with_lora(init, r, scale),
        None => Ok(c),
    }
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub enc_in: Conv2d,
    pub enc_high: Res,
    pub enc_down: Conv2d,
    pub enc_low: Res,
    pub enc_out: Conv2d,
    pub dec_in: Conv2d,
    pub dec_low: Res,
    pub dec_high: Res,
    pub dec_out: Conv2d,
    pub rts: Vec<RtsBlock>,
    /// Multiplier applied to encoder outputs so latents have roughly unit variance.
    pub latent_scale: f64,
}

pub const VAE_RTS_SITES: usize = 2;

impl Vae {
    pub fn new(init: &Init, cfg: VaeConfig) -> Result<Self> {
        let w = cfg.width;
        let c = cfg.latent_channels;
        let b = ParamKind::Base;
        let lora = cfg.lora_rank.map(|r| (r, cfg.lora_scale));
        let rts = match &cfg.rts {
            Some(r) => (0..VAE_RTS_SITES).map(|i| RtsBlock::new(&init.sub(&format!("rts{i}")), w, r)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            enc_in: conv(&init.sub("enc_in"), ConvSpec::new(12, w, 3, b), lora)?,
            enc_high: Res::new(&init.sub("enc_high"), w, lora)?,
            enc_down: conv(&init.sub("enc_down"), ConvSpec::new(w, w, 3, b).stride(2), lora)?,
            enc_low: Res::new(&init.sub("enc_low"), w, lora)?,
            enc_out: conv(&init.sub("enc_out"), ConvSpec::new(w, c, 3, b), lora)?,
            dec_in: Conv2d::new(&init.sub("dec_in"), ConvSpec::new(c, w, 3, b))?,
            dec_low: Res::new(&init.sub("dec_low"), w, None)?,
            dec_high: Res::new(&init.sub("dec_high"), w, None)?,
            dec_out: Conv2d::new(&init.sub("dec_out"), ConvSpec::new(w, 12, 3, b))?,
            rts,
            latent_scale: 1.0,
            cfg,
        })
    }

    pub fn has_rts(&self) -> bool {
        !self.rts.is_empty()
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % VAE_DOWNSAMPLE != 0 || w % VAE_DOWNSAMPLE != 0 {
            return Err(Error::Dimension(format!("encoder input {:?} needs 3 channels and sides divisible by {VAE_DOWNSAMPLE}", x.dims())));
        }
        Ok(())
    }

    /// Per-frame scaled encoder, `[T,3,H,W] -> [T,C,H/4,W/4]`, on signed images in `[-1, 1]`.
    pub fn encode_frames(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        self.check_image(x)?;
        let h = self.enc_in.forward(&pixel_unshuffle(x, 2)?, fwd)?;
        let h = self.enc_high.forward(&h, fwd)?;
        let h = self.enc_down.forward(&h.silu()?, fwd)?;
        let h = self.enc_low.forward(&h, fwd)?;
        let z = self.enc_out.forward(&h.silu()?, fwd)?;
        Ok(z.affine(self.latent_scale, 0.0)?)
    }

    /// Decoder (taking scaled latents) as a phase list over `SegState::x`.
    pub fn decoder_phases<'a>(&'a self, tag: &str) -> Vec<Phase<'a>> {
        let mut ph = Vec::with_capacity(4);
        let inv = 1.0 / self.latent_scale;
        ph.push(Phase::spatial(format!("{tag}.low"), move |mut s: SegState, fwd: &Fwd| {
            let h = self.dec_in.forward(&s.x.affine(inv, 0.0)?, fwd)?;
            s.x = self.dec_low.forward(&h, fwd)?;
            Ok(s)
        }));
        if let Some(b) = self.rts.first() {
            ph.push(Phase::temporal(format!("{tag}.rts0"), b));
        }
        ph.push(Phase::spatial(format!("{tag}.high"), move |mut s: SegState, fwd: &Fwd| {
            let up = upsample_nearest2(&s.x)?;
            fwd.note(&up);
            s.x = self.dec_high.forward(&up, fwd)?;
            Ok(s)
        }));
        if let Some(b) = self.rts.get(1) {
            ph.push(Phase::temporal(format!("{tag}.rts1"), b));
        }
        ph.push(Phase::spatial(format!("{tag}.out"), move |mut s: SegState, fwd: &Fwd| {
            let h = self.dec_out.forward(&s.x.silu()?, fwd)?;
            s.x = pixel_shuffle(&h, 2)?;
            fwd.note(&s.x);
            Ok(s)
        }));
        ph
    }

    /// Full-sequence decoder, `[T,C,h,w] -> [T,3,4h,4w]`.
    pub fn decode(&self, z: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let (n, c, _, _) = z.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Dimension(format!("decoder input has {c} channels, expected {}", self.cfg.latent_channels)));
        }
        let phases = self.decoder_phases("vae.dec");
        let (out, _) = execute(&phases, SegState::new(z.clone()), &make_plan(n, n)?, fwd, ExecMode::Sequential)?;
        Ok(out.x)
    }

    pub fn encode(&self, video: &VideoTensor, fwd: &Fwd) -> Result<LatentState> {
        let w = self.dec_in.weight.tensor();
        let x = video.to_signed_tensor(w.device(), w.dtype())?;
        LatentState::new(self.encode_frames(&x, fwd)?, LatentRole::Clean, None)
    }

    pub fn decode_video(&self, z: &LatentState, fwd: &Fwd) -> Result<VideoTensor> {
        VideoTensor::from_signed_tensor(&self.decode(&z.z, fwd)?)
    }
}

impl Module for Vae {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.enc_in.visit(f);
        self.enc_high.visit(f);
        self.enc_down.visit(f);
        self.enc_low.visit(f);
        self.enc_out.visit(f);
        self.dec_in.visit(f);
        self.dec_low.visit(f);
        self.dec_high.visit(f);
        self.dec_out.visit(f);
        self.rts.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.enc_in.visit_mut(f);
        self.enc_high.visit_mut(f);
        self.enc_down.visit_mut(f);
        self.enc_low.visit_mut(f);
        self.enc_out.visit_mut(f);
        self.dec_in.visit_mut(f);
        self.dec_low.visit_mut(f);
        self.dec_high.visit_mut(f);
        self.dec_out.visit_mut(f);
        self.rts.visit_mut(f);
    }
}
