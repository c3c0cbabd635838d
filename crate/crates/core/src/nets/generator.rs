//! The one-step generator: upsample, encode, one UNet evaluation at the
//! degradation-matched timestep, closed-form reconstruction, decode.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::checkpoint::Checkpoint;
use super::unet::{Unet, UnetConfig, UNET_RTS_SITES};
use super::vae::{Vae, VaeConfig, VAE_DOWNSAMPLE, VAE_RTS_SITES};
use crate::nn::{Fwd, Init, Module, Param, ParamKind};
use crate::rts::RtsConfig;
use crate::schedule::{estimate_degradation, reconstruct, select_timestep, DegradationFactor, NoiseSchedule, ScheduleKind, D_MIN};
use crate::tai::{execute, make_plan, ExecMode, MemoryReport, Phase, SegState, TaiPlan};
use crate::videodata::resample::upscale_cubic;
use crate::videodata::VideoTensor;
use crate::{Error, Result};

/// Where RTS blocks sit, by phase name.
pub const RTS_PLACEMENT: &str = "unet:enc1,enc2,mid,dec2,dec1;vae_decoder:low,high";

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub upscale: usize,
    pub vae: VaeConfig,
    pub unet: UnetConfig,
    pub schedule: ScheduleKind,
    /// Estimate `d` from the input and match the timestep; otherwise use `fixed_t`.
    pub drs: bool,
    pub fixed_t: usize,
    /// Lower bound applied to the estimated degradation factor.
    pub d_min: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { upscale: 4, vae: VaeConfig::default(), unet: UnetConfig::default(), schedule: ScheduleKind::default(), drs: true, fixed_t: 999, d_min: D_MIN }
    }
}

impl GeneratorConfig {
    pub fn with_rts(mut self, rts: Option<RtsConfig>) -> Self {
        self.vae.rts = rts;
        self.unet.rts = rts;
        self
    }

    pub fn with_lora(mut self, rank: Option<usize>) -> Self {
        self.vae.lora_rank = rank;
        self.unet.lora_rank = rank;
        self
    }

    pub fn rts_sites(&self) -> usize {
        self.vae.rts.map_or(0, |_| VAE_RTS_SITES) + self.unet.rts.map_or(0, |_| UNET_RTS_SITES)
    }
}

/// Per-clip inputs shared by every sub-batch: the upsampled signed frames and
/// the single degradation estimate.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x_up: Tensor,
    pub d: DegradationFactor,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub vae: Vae,
    pub unet: Unet,
    pub sched: NoiseSchedule,
}

impl Generator {
    pub fn new(seed: u64, cfg: GeneratorConfig) -> Result<Self> {
        Self::with_dtype(seed, cfg, DType::F32)
    }

    /// Checkpoints always store `f32`; other dtypes are for numerical tests.
    pub fn with_dtype(seed: u64, cfg: GeneratorConfig, dtype: DType) -> Result<Self> {
        if cfg.upscale == 0 {
            return Err(Error::Config("upscale must be >= 1".into()));
        }
        if cfg.vae.latent_channels != cfg.unet.latent_channels {
            return Err(Error::Config("VAE and UNet latent channels differ".into()));
        }
        let sched = NoiseSchedule::build(cfg.unet.steps, cfg.schedule)?;
        sched.check_t(cfg.fixed_t)?;
        let init = Init::new(seed, dtype).sub("g");
        Ok(Self { vae: Vae::new(&init.sub("vae"), cfg.vae.clone())?, unet: Unet::new(&init.sub("unet"), cfg.unet.clone())?, sched, cfg })
    }

    pub fn device(&self) -> Device {
        self.vae.dec_in.weight.var().device().clone()
    }

    pub fn dtype(&self) -> DType {
        self.vae.dec_in.weight.var().dtype()
    }

    /// Only adapters and RTS blocks stay trainable.
    pub fn freeze_base(&mut self) {
        self.set_trainable_by(&|p: &Param| p.kind() != ParamKind::Base);
    }

    pub fn unfreeze_all(&mut self) {
        self.set_trainable_by(&|_| true);
    }

    /// Cubic pre-upsampling to the output size, as signed frames.
    pub fn upsample_input(&self, v_lr: &VideoTensor) -> Result<Tensor> {
        let (_, _, h, w) = v_lr.dims();
        let f = self.cfg.upscale;
        let m = 4 * VAE_DOWNSAMPLE;
        if !(h * f).is_multiple_of(m) || !(w * f).is_multiple_of(m) {
            return Err(Error::Dimension(format!("LR frames {h}x{w} times {f} must be divisible by {m}")));
        }
        let up = if f == 1 { v_lr.data().clone() } else { upscale_cubic(v_lr.data(), f)? };
        VideoTensor::from_clamped(up)?.to_signed_tensor(&self.device(), self.dtype())
    }

    pub fn degradation(&self, v_lr: &VideoTensor) -> Result<(DegradationFactor, usize)> {
        if self.cfg.drs {
            let d = DegradationFactor::new(estimate_degradation(v_lr).value().max(self.cfg.d_min))?;
            Ok((d, select_timestep(d, &self.sched)))
        } else {
            let t = self.cfg.fixed_t;
            Ok((DegradationFactor::new(self.sched.sqrt_alpha_bar(t))?, t))
        }
    }

    pub fn prepare(&self, v_lr: &VideoTensor) -> Result<Prepared> {
        let (d, t) = self.degradation(v_lr)?;
        Ok(Prepared { x_up: self.upsample_input(v_lr)?, d, t })
    }

    /// Uses the supplied factor instead of estimating one.
    pub fn prepare_with_d(&self, v_lr: &VideoTensor, d: DegradationFactor) -> Result<Prepared> {
        Ok(Prepared { x_up: self.upsample_input(v_lr)?, d, t: select_timestep(d, &self.sched) })
    }

    /// The whole generator as a phase list from upsampled frames to output frames.
    pub fn phases<'a>(&'a self, prep: &Prepared) -> Result<Vec<Phase<'a>>> {
        let mut ph = vec![Phase::spatial("encode", move |mut s: SegState, fwd: &Fwd| {
            let z = self.vae.encode_frames(&s.x, fwd)?;
            s.x = z.clone();
            s.z_lr = Some(z);
            Ok(s)
        })];
        ph.extend(self.unet.phases(prep.t, "unet")?);
        let d = prep.d.value();
        ph.push(Phase::spatial("reconstruct", move |mut s: SegState, fwd: &Fwd| {
            let z_lr = s.z_lr.take().ok_or_else(|| Error::Dimension("missing z_LR".into()))?;
            s.x = reconstruct(&z_lr, &s.x, d)?;
            fwd.note(&s.x);
            Ok(s)
        }));
        ph.extend(self.vae.decoder_phases("decode"));
        Ok(ph)
    }

    pub fn run(&self, prep: &Prepared, plan: &TaiPlan, fwd: &Fwd, mode: ExecMode) -> Result<(Tensor, MemoryReport)> {
        let phases = self.phases(prep)?;
        let (out, report) = execute(&phases, SegState::new(prep.x_up.clone()), plan, fwd, mode)?;
        Ok((out.x, report))
    }

    /// Differentiable full-sequence forward returning signed output frames.
    pub fn forward_prepared(&self, prep: &Prepared, fwd: &Fwd) -> Result<Tensor> {
        let n = prep.x_up.dim(0)?;
        Ok(self.run(prep, &make_plan(n, n)?, fwd, ExecMode::Sequential)?.0)
    }

    pub fn forward_tensor(&self, v_lr: &VideoTensor, fwd: &Fwd) -> Result<Tensor> {
        self.forward_prepared(&self.prepare(v_lr)?, fwd)
    }

    /// Inference: output video at `upscale` times the input size.
    pub fn generate(&self, v_lr: &VideoTensor) -> Result<VideoTensor> {
        VideoTensor::from_signed_tensor(&self.forward_tensor(v_lr, &Fwd::default())?.detach())
    }

    /// Metadata plus every parameter under its full name.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.write_meta(&mut ck);
        ck.push_module(self);
        ck
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        let c = &self.cfg;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |r| r.to_string());
        ck.set_meta("upscale", c.upscale);
        ck.set_meta("s", VAE_DOWNSAMPLE);
        ck.set_meta("c_lat", c.vae.latent_channels);
        ck.set_meta("vae_width", c.vae.width);
        ck.set_meta("unet_channels", c.unet.channels.map(|v| v.to_string()).join(","));
        ck.set_meta("temb_dim", c.unet.temb_dim);
        ck.set_meta("schedule_kind", c.schedule.name());
        let params = match c.schedule {
            ScheduleKind::LinearBeta { beta_start, beta_end } => format!("{beta_start:?},{beta_end:?}"),
            ScheduleKind::Cosine { offset } => format!("{offset:?}"),
        };
        ck.set_meta("schedule_params", params);
        ck.set_meta("schedule_steps", c.unet.steps);
        ck.set_meta("lora_rank", opt(c.unet.lora_rank));
        ck.set_meta("vae_lora_rank", opt(c.vae.lora_rank));
        ck.set_meta("lora_scale", format!("{:?}", c.unet.lora_scale));
        let rts = |r: Option<RtsConfig>| match r {
            Some(r) => format!("{},{},{}", r.channel_ratio, opt(r.inner_channels), r.attn_dim),
            None => "none".into(),
        };
        ck.set_meta("unet_rts", rts(c.unet.rts));
        ck.set_meta("vae_rts", rts(c.vae.rts));
        let mut placement = Vec::new();
        if c.unet.rts.is_some() {
            placement.push(RTS_PLACEMENT.split(';').next().expect("placement"));
        }
        if c.vae.rts.is_some() {
            placement.push(RTS_PLACEMENT.split(';').nth(1).expect("placement"));
        }
        ck.set_meta("rts_placement", if placement.is_empty() { "none".into() } else { placement.join(";") });
        ck.set_meta("latent_scale", format!("{:?}", self.vae.latent_scale));
        ck.set_meta("drs", c.drs);
        ck.set_meta("fixed_t", c.fixed_t);
        ck.set_meta("d_min", format!("{:?}", c.d_min));
        let frozen = self.params().iter().any(|p| p.kind() == ParamKind::Base && !p.trainable());
        ck.set_meta("frozen_base", frozen);
    }

    pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<GeneratorConfig> {
        let opt = |key: &str| -> Result<Option<usize>> {
            match ck.meta(key)? {
                "none" => Ok(None),
                v => v.parse().map(Some).map_err(|e| Error::checkpoint(key, e)),
            }
        };
        let rts = |key: &str| -> Result<Option<RtsConfig>> {
            let v = ck.meta(key)?;
            if v == "none" {
                return Ok(None);
            }
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::checkpoint(key, format!("bad value `{v}`")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| Error::checkpoint(key, e));
            Ok(Some(RtsConfig {
                channel_ratio: num(parts[0])?,
                inner_channels: if parts[1] == "none" { None } else { Some(num(parts[1])?) },
                attn_dim: num(parts[2])?,
            }))
        };
        let s: usize = ck.meta_parse("s")?;
        if s != VAE_DOWNSAMPLE {
            return Err(Error::checkpoint("s", format!("only {VAE_DOWNSAMPLE} is supported, found {s}")));
        }
        let channels: Vec<usize> =
            ck.meta("unet_channels")?.split(',').map(|v| v.parse().map_err(|e| Error::checkpoint("unet_channels", e))).collect::<Result<_>>()?;
        let channels: [usize; 3] = channels.try_into().map_err(|_| Error::checkpoint("unet_channels", "expected three widths"))?;
        let floats = |key: &str| -> Result<Vec<f64>> { ck.meta(key)?.split(',').map(|v| v.parse().map_err(|e| Error::checkpoint(key, e))).collect() };
        let sp = floats("schedule_params")?;
        let schedule = match (ck.meta("schedule_kind")?, sp.as_slice()) {
            ("linear_beta", [a, b]) => ScheduleKind::LinearBeta { beta_start: *a, beta_end: *b },
            ("cosine", [o]) => ScheduleKind::Cosine { offset: *o },
            (k, _) => return Err(Error::checkpoint("schedule_kind", format!("unknown kind `{k}` or bad parameters"))),
        };
        let c_lat = ck.meta_parse("c_lat")?;
        let lora_scale = ck.meta_parse("lora_scale")?;
        Ok(GeneratorConfig {
            upscale: ck.meta_parse("upscale")?,
            vae: VaeConfig { latent_channels: c_lat, width: ck.meta_parse("vae_width")?, lora_rank: opt("vae_lora_rank")?, lora_scale, rts: rts("vae_rts")? },
            unet: UnetConfig {
                latent_channels: c_lat,
                channels,
                temb_dim: ck.meta_parse("temb_dim")?,
                steps: ck.meta_parse("schedule_steps")?,
                lora_rank: opt("lora_rank")?,
                lora_scale,
                rts: rts("unet_rts")?,
            },
            schedule,
            drs: ck.meta_parse("drs")?,
            fixed_t: ck.meta_parse("fixed_t")?,
            d_min: ck.meta_parse("d_min")?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut g = Self::new(0, Self::config_from_checkpoint(ck)?)?;
        ck.load_module(&mut g)?;
        g.vae.latent_scale = ck.meta_parse("latent_scale")?;
        if ck.meta_parse::<bool>("frozen_base")? {
            g.freeze_base();
        }
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// A generator with configuration `cfg` whose backbone weights and latent
    /// scale are copied from `self`; adapters and RTS blocks are freshly
    /// initialised from `seed`. The base networks of both configs must match.
    pub fn variant(&self, seed: u64, cfg: GeneratorConfig) -> Result<Self> {
        let mut g = Self::with_dtype(seed, cfg, self.dtype())?;
        let index: std::collections::BTreeMap<String, Tensor> =
            self.params().into_iter().filter(|p| p.kind() == ParamKind::Base).map(|p| (p.name().to_string(), p.var().as_tensor().detach())).collect();
        let mut err = None;
        g.visit_mut(&mut |p| {
            if err.is_some() || p.kind() != ParamKind::Base {
                return;
            }
            let res = match index.get(p.name()) {
                Some(t) if t.dims() == p.var().dims() => p.set(t),
                _ => Err(Error::checkpoint(p.name(), "backbone parameter differs between configurations")),
            };
            if let Err(e) = res {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        g.vae.latent_scale = self.vae.latent_scale;
        g.freeze_base();
        Ok(g)
    }

    /// Independent copy: same configuration and values, separate storage.
    pub fn deep_copy(&self) -> Result<Self> {
        Self::from_checkpoint(&self.to_checkpoint())
    }
}

impl Module for Generator {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.vae.visit(f);
        self.unet.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.vae.visit_mut(f);
        self.unet.visit_mut(f);
    }
}
