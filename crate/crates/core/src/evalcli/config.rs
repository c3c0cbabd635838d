//! Flat `section.key = value` run configuration covering every tunable.

use std::str::FromStr;

use crate::nets::pretrain::PretrainConfig;
use crate::nets::GeneratorConfig;
use crate::rts::RtsConfig;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::sjd::{ConsistencySpace, OmegaKind, SjdConfig};
use crate::tai::ExecMode;
use crate::videodata::pairs::PairConfig;
use crate::videodata::MotionKind;
use crate::{Error, Result};

const DEFAULT_BETA_START: f64 = 1e-4;
const DEFAULT_BETA_END: f64 = 0.02;
const DEFAULT_COSINE_OFFSET: f64 = 0.008;

/// Every accepted key with a one-line description; defaults come from [`RunConfig::default`].
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "generator initialisation seed"),
    ("data.n_frames", "frames per training clip"),
    ("data.hr_size", "ground-truth side length"),
    ("data.factor", "downscale factor of the degradation"),
    ("data.motion", "none | translate | rotate | mixed"),
    ("data.max_blur", "upper bound of the per-clip blur sigma"),
    ("data.max_noise", "upper bound of the per-clip noise sigma"),
    ("data.max_block", "upper bound of the block-artifact strength"),
    ("data.seed", "training data stream seed"),
    ("generator.upscale", "input upsampling factor"),
    ("generator.drs", "match the timestep to the estimated degradation"),
    ("generator.fixed_t", "timestep used when drs is off"),
    ("generator.d_min", "floor of the degradation factor"),
    ("schedule.kind", "linear_beta | cosine"),
    ("schedule.T", "number of diffusion steps"),
    ("schedule.beta_start", "first beta of the linear schedule"),
    ("schedule.beta_end", "last beta of the linear schedule"),
    ("schedule.cosine_offset", "offset of the cosine schedule"),
    ("vae.latent_channels", "latent channels"),
    ("vae.width", "encoder/decoder width"),
    ("vae.lora_rank", "adapter rank or none"),
    ("vae.lora_scale", "adapter scale"),
    ("vae.rts", "RTS blocks in the decoder"),
    ("unet.channels", "three stage widths, comma separated"),
    ("unet.temb_dim", "timestep embedding width"),
    ("unet.lora_rank", "adapter rank or none"),
    ("unet.lora_scale", "adapter scale"),
    ("unet.rts", "RTS blocks after each stage"),
    ("rts.channel_ratio", "reduction factor of the convolution unit"),
    ("rts.inner_channels", "explicit inner width (multiple of 3) or none"),
    ("rts.attn_dim", "attention embedding width"),
    ("pretrain.vae_steps", "autoencoder pretraining steps"),
    ("pretrain.vae_lr", "autoencoder learning rate"),
    ("pretrain.unet_steps", "denoiser pretraining steps"),
    ("pretrain.unet_lr", "denoiser learning rate"),
    ("pretrain.scale_clips", "clips used to calibrate the latent scale"),
    ("pretrain.seed", "denoiser pretraining noise seed"),
    ("pretrain.init", "generator checkpoint to start from instead of pretraining, or none"),
    ("sjd.lambda", "weight of the consistency term"),
    ("sjd.omega", "mean_abs | unit"),
    ("sjd.sigma_norm", "target magnitude of mean_abs weighting"),
    ("sjd.t_lo", "smallest sampled timestep"),
    ("sjd.t_hi", "largest sampled timestep"),
    ("sjd.update_ratio", "fake-network updates per generator update"),
    ("sjd.consistency_space", "x0 | eps"),
    ("sjd.weight", "weight of the distillation surrogate"),
    ("sjd.real_freeze_after", "stop updating the real network after this step, or none"),
    ("sjd.tru_rts", "RTS blocks in the score networks"),
    ("sjd.gen_lr", "generator learning rate"),
    ("sjd.tru_lr", "score network learning rate"),
    ("sjd.beta1", "Adam first-moment decay"),
    ("sjd.beta2", "Adam second-moment decay"),
    ("sjd.seed", "training stream seed (timesteps and noise)"),
    ("aux.mse_weight", "pixel MSE weight"),
    ("aux.perceptual", "feature-matching loss on/off"),
    ("aux.perceptual_weight", "feature-matching weight"),
    ("aux.gan", "adversarial loss on/off"),
    ("aux.gan_weight", "adversarial weight"),
    ("aux.disc_lr", "discriminator learning rate"),
    ("aux.feature_seed", "seed of the frozen feature network"),
    ("tai.b", "frames per sub-batch, 0 for the whole clip"),
    ("tai.mode", "sequential | parallel"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PairConfig,
    /// RTS placement is carried by `rts`, `vae_rts` and `unet_rts`.
    pub generator: GeneratorConfig,
    /// Parameters of both schedule kinds; the active kind is `generator.schedule`.
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
    pub rts: RtsConfig,
    pub vae_rts: bool,
    pub unet_rts: bool,
    pub pretrain: PretrainConfig,
    pub init: Option<String>,
    /// `omega` is rebuilt from `omega_unit` and `sigma_norm`.
    pub sjd: SjdConfig,
    pub omega_unit: bool,
    pub sigma_norm: f64,
    pub tai_b: usize,
    pub tai_mode: ExecMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        Self {
            seed: 0,
            data: PairConfig::default(),
            rts: generator.unet.rts.unwrap_or_default(),
            vae_rts: generator.vae.rts.is_some(),
            unet_rts: generator.unet.rts.is_some(),
            generator,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            cosine_offset: DEFAULT_COSINE_OFFSET,
            pretrain: PretrainConfig::default(),
            init: None,
            sjd: SjdConfig::default(),
            omega_unit: false,
            sigma_norm: 1.0,
            tai_b: 0,
            tai_mode: ExecMode::Sequential,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{v}` for `{key}`: expected true or false"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), ToString::to_string)
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Defaults overridden by `section.key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected `section.key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.generator;
        let s = &self.sjd;
        Some(match key {
            "seed" => self.seed.to_string(),
            "data.n_frames" => self.data.n_frames.to_string(),
            "data.hr_size" => self.data.hr_size.to_string(),
            "data.factor" => self.data.factor.to_string(),
            "data.motion" => self.data.motion.as_str().into(),
            "data.max_blur" => float(self.data.max_blur),
            "data.max_noise" => float(self.data.max_noise),
            "data.max_block" => float(self.data.max_block),
            "data.seed" => self.data.seed.to_string(),
            "generator.upscale" => g.upscale.to_string(),
            "generator.drs" => g.drs.to_string(),
            "generator.fixed_t" => g.fixed_t.to_string(),
            "generator.d_min" => float(g.d_min),
            "schedule.kind" => g.schedule.name().into(),
            "schedule.T" => g.unet.steps.to_string(),
            "schedule.beta_start" => float(self.beta_start),
            "schedule.beta_end" => float(self.beta_end),
            "schedule.cosine_offset" => float(self.cosine_offset),
            "vae.latent_channels" => g.vae.latent_channels.to_string(),
            "vae.width" => g.vae.width.to_string(),
            "vae.lora_rank" => opt(&g.vae.lora_rank),
            "vae.lora_scale" => float(g.vae.lora_scale),
            "vae.rts" => self.vae_rts.to_string(),
            "unet.channels" => g.unet.channels.map(|c| c.to_string()).join(","),
            "unet.temb_dim" => g.unet.temb_dim.to_string(),
            "unet.lora_rank" => opt(&g.unet.lora_rank),
            "unet.lora_scale" => float(g.unet.lora_scale),
            "unet.rts" => self.unet_rts.to_string(),
            "rts.channel_ratio" => self.rts.channel_ratio.to_string(),
            "rts.inner_channels" => opt(&self.rts.inner_channels),
            "rts.attn_dim" => self.rts.attn_dim.to_string(),
            "pretrain.vae_steps" => self.pretrain.vae_steps.to_string(),
            "pretrain.vae_lr" => float(self.pretrain.vae_lr),
            "pretrain.unet_steps" => self.pretrain.unet_steps.to_string(),
            "pretrain.unet_lr" => float(self.pretrain.unet_lr),
            "pretrain.scale_clips" => self.pretrain.scale_clips.to_string(),
            "pretrain.seed" => self.pretrain.seed.to_string(),
            "pretrain.init" => opt(&self.init),
            "sjd.lambda" => float(s.lambda),
            "sjd.omega" => if self.omega_unit { "unit" } else { "mean_abs" }.into(),
            "sjd.sigma_norm" => float(self.sigma_norm),
            "sjd.t_lo" => s.t_lo.to_string(),
            "sjd.t_hi" => s.t_hi.to_string(),
            "sjd.update_ratio" => s.update_ratio.to_string(),
            "sjd.consistency_space" => match s.consistency_space {
                ConsistencySpace::X0 => "x0",
                ConsistencySpace::Eps => "eps",
            }
            .into(),
            "sjd.weight" => float(s.weight),
            "sjd.real_freeze_after" => opt(&s.real_freeze_after),
            "sjd.tru_rts" => s.tru_rts.to_string(),
            "sjd.gen_lr" => float(s.gen_lr),
            "sjd.tru_lr" => float(s.tru_lr),
            "sjd.beta1" => float(s.beta1),
            "sjd.beta2" => float(s.beta2),
            "sjd.seed" => s.seed.to_string(),
            "aux.mse_weight" => float(s.aux.mse_weight),
            "aux.perceptual" => s.aux.perceptual.to_string(),
            "aux.perceptual_weight" => float(s.aux.perceptual_weight),
            "aux.gan" => s.aux.gan.to_string(),
            "aux.gan_weight" => float(s.aux.gan_weight),
            "aux.disc_lr" => float(s.aux.disc_lr),
            "aux.feature_seed" => s.aux.feature_seed.to_string(),
            "tai.b" => self.tai_b.to_string(),
            "tai.mode" => match self.tai_mode {
                ExecMode::Sequential => "sequential",
                ExecMode::Parallel => "parallel",
            }
            .into(),
            _ => return None,
        })
    }

    fn sync_schedule(&mut self) {
        self.generator.schedule = match self.generator.schedule {
            ScheduleKind::LinearBeta { .. } => ScheduleKind::LinearBeta { beta_start: self.beta_start, beta_end: self.beta_end },
            ScheduleKind::Cosine { .. } => ScheduleKind::Cosine { offset: self.cosine_offset },
        };
    }

    /// Sets one key; unknown keys give [`Error::UnknownKey`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.generator;
        let s = &mut self.sjd;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.n_frames" => self.data.n_frames = parse(key, v)?,
            "data.hr_size" => self.data.hr_size = parse(key, v)?,
            "data.factor" => self.data.factor = parse(key, v)?,
            "data.motion" => self.data.motion = MotionKind::from_str(v).map_err(|e| Error::Config(format!("`{key}`: {e}")))?,
            "data.max_blur" => self.data.max_blur = parse(key, v)?,
            "data.max_noise" => self.data.max_noise = parse(key, v)?,
            "data.max_block" => self.data.max_block = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "generator.upscale" => g.upscale = parse(key, v)?,
            "generator.drs" => g.drs = parse_bool(key, v)?,
            "generator.fixed_t" => g.fixed_t = parse(key, v)?,
            "generator.d_min" => g.d_min = parse(key, v)?,
            "schedule.kind" => {
                g.schedule = match v {
                    "linear_beta" => ScheduleKind::LinearBeta { beta_start: 0.0, beta_end: 0.0 },
                    "cosine" => ScheduleKind::Cosine { offset: 0.0 },
                    _ => return Err(Error::Config(format!("bad value `{v}` for `{key}`: expected linear_beta or cosine"))),
                }
            }
            "schedule.T" => g.unet.steps = parse(key, v)?,
            "schedule.beta_start" => self.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.beta_end = parse(key, v)?,
            "schedule.cosine_offset" => self.cosine_offset = parse(key, v)?,
            "vae.latent_channels" => {
                g.vae.latent_channels = parse(key, v)?;
                g.unet.latent_channels = g.vae.latent_channels;
            }
            "vae.width" => g.vae.width = parse(key, v)?,
            "vae.lora_rank" => g.vae.lora_rank = parse_opt(key, v)?,
            "vae.lora_scale" => g.vae.lora_scale = parse(key, v)?,
            "vae.rts" => self.vae_rts = parse_bool(key, v)?,
            "unet.channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                g.unet.channels = parts.try_into().map_err(|_| Error::Config(format!("`{key}` needs exactly three comma-separated widths")))?;
            }
            "unet.temb_dim" => g.unet.temb_dim = parse(key, v)?,
            "unet.lora_rank" => g.unet.lora_rank = parse_opt(key, v)?,
            "unet.lora_scale" => g.unet.lora_scale = parse(key, v)?,
            "unet.rts" => self.unet_rts = parse_bool(key, v)?,
            "rts.channel_ratio" => self.rts.channel_ratio = parse(key, v)?,
            "rts.inner_channels" => self.rts.inner_channels = parse_opt(key, v)?,
            "rts.attn_dim" => self.rts.attn_dim = parse(key, v)?,
            "pretrain.vae_steps" => self.pretrain.vae_steps = parse(key, v)?,
            "pretrain.vae_lr" => self.pretrain.vae_lr = parse(key, v)?,
            "pretrain.unet_steps" => self.pretrain.unet_steps = parse(key, v)?,
            "pretrain.unet_lr" => self.pretrain.unet_lr = parse(key, v)?,
            "pretrain.scale_clips" => self.pretrain.scale_clips = parse(key, v)?,
            "pretrain.seed" => self.pretrain.seed = parse(key, v)?,
            "pretrain.init" => self.init = parse_opt(key, v)?,
            "sjd.lambda" => s.lambda = parse(key, v)?,
            "sjd.omega" => {
                self.omega_unit = match v {
                    "unit" => true,
                    "mean_abs" => false,
                    _ => return Err(Error::Config(format!("bad value `{v}` for `{key}`: expected mean_abs or unit"))),
                }
            }
            "sjd.sigma_norm" => self.sigma_norm = parse(key, v)?,
            "sjd.t_lo" => s.t_lo = parse(key, v)?,
            "sjd.t_hi" => s.t_hi = parse(key, v)?,
            "sjd.update_ratio" => s.update_ratio = parse(key, v)?,
            "sjd.consistency_space" => {
                s.consistency_space = match v {
                    "x0" => ConsistencySpace::X0,
                    "eps" => ConsistencySpace::Eps,
                    _ => return Err(Error::Config(format!("bad value `{v}` for `{key}`: expected x0 or eps"))),
                }
            }
            "sjd.weight" => s.weight = parse(key, v)?,
            "sjd.real_freeze_after" => s.real_freeze_after = parse_opt(key, v)?,
            "sjd.tru_rts" => s.tru_rts = parse_bool(key, v)?,
            "sjd.gen_lr" => s.gen_lr = parse(key, v)?,
            "sjd.tru_lr" => s.tru_lr = parse(key, v)?,
            "sjd.beta1" => s.beta1 = parse(key, v)?,
            "sjd.beta2" => s.beta2 = parse(key, v)?,
            "sjd.seed" => s.seed = parse(key, v)?,
            "aux.mse_weight" => s.aux.mse_weight = parse(key, v)?,
            "aux.perceptual" => s.aux.perceptual = parse_bool(key, v)?,
            "aux.perceptual_weight" => s.aux.perceptual_weight = parse(key, v)?,
            "aux.gan" => s.aux.gan = parse_bool(key, v)?,
            "aux.gan_weight" => s.aux.gan_weight = parse(key, v)?,
            "aux.disc_lr" => s.aux.disc_lr = parse(key, v)?,
            "aux.feature_seed" => s.aux.feature_seed = parse(key, v)?,
            "tai.b" => self.tai_b = parse(key, v)?,
            "tai.mode" => {
                self.tai_mode = match v {
                    "sequential" => ExecMode::Sequential,
                    "parallel" => ExecMode::Parallel,
                    _ => return Err(Error::Config(format!("bad value `{v}` for `{key}`: expected sequential or parallel"))),
                }
            }
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        self.sync_schedule();
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        g.vae.rts = self.vae_rts.then_some(self.rts);
        g.unet.rts = self.unet_rts.then_some(self.rts);
        g
    }

    pub fn sjd_config(&self) -> SjdConfig {
        let mut s = self.sjd.clone();
        s.omega = if self.omega_unit { OmegaKind::Unit } else { OmegaKind::MeanAbs { sigma_norm: self.sigma_norm } };
        s
    }

    /// Range checks that do not need a constructed model.
    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if !(g.d_min > 0.0 && g.d_min <= 1.0) {
            return Err(Error::Config(format!("generator.d_min must lie in (0, 1], got {}", g.d_min)));
        }
        if g.fixed_t == 0 || g.fixed_t > g.unet.steps {
            return Err(Error::Config(format!("generator.fixed_t must lie in [1, {}], got {}", g.unet.steps, g.fixed_t)));
        }
        if !self.data.hr_size.is_multiple_of(self.data.factor.max(1)) || self.data.factor == 0 {
            return Err(Error::Config(format!("data.hr_size {} must be a multiple of data.factor {}", self.data.hr_size, self.data.factor)));
        }
        if self.data.n_frames == 0 {
            return Err(Error::Config("data.n_frames must be >= 1".into()));
        }
        self.rts.inner_for(g.vae.width.min(g.unet.channels[0]))?;
        let sched = NoiseSchedule::build(g.unet.steps, g.schedule).map_err(|e| Error::Config(e.to_string()))?;
        self.sjd_config().validate(&sched)
    }
}

impl std::fmt::Display for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text())
    }
}
