//! Distillation of the one-step generator against two temporal score networks.
//!
//! A real network models ground-truth video latents and a fake network models
//! generator outputs. Their disagreement on a noised generator latent gives a
//! per-element update direction for the generator (the realistic term), and the
//! disagreement of their inter-frame differences gives the consistency term.
//! Both are applied through surrogate inner products with stopped-gradient
//! directions so that reverse-mode differentiation realises the prescribed update.

mod aux;
mod trainer;

pub use aux::{aux_losses, AuxConfig, AuxTerms, FeatureNet, FrameDiscriminator};
pub use trainer::{train, LossRow, Trainer, TrainingState, LOG_HEADER};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nets::{Generator, Unet, UnetConfig, Vae};
use crate::nn::ops::{mse, randn, scalar};
use crate::nn::{Fwd, Init, Module, ParamKind};
use crate::schedule::{diffuse, predict_clean, NoiseSchedule};
use crate::{Error, Result};

pub const OMEGA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaKind {
    /// `sigma_norm / (mean |direction| + eps)`, one value per clip.
    MeanAbs { sigma_norm: f64 },
    /// No normalisation.
    Unit,
}

impl Default for OmegaKind {
    fn default() -> Self {
        Self::MeanAbs { sigma_norm: 1.0 }
    }
}

/// Which network outputs the consistency term differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConsistencySpace {
    /// Noise predictions as returned by the networks.
    Eps,
    /// Clean-latent estimates obtained from the noise predictions.
    #[default]
    X0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SjdConfig {
    pub lambda: f64,
    pub omega: OmegaKind,
    pub t_lo: usize,
    pub t_hi: usize,
    /// Fake-network updates per generator update.
    pub update_ratio: usize,
    pub consistency_space: ConsistencySpace,
    /// Weight of the distillation surrogate in the generator objective.
    pub weight: f64,
    /// Stop updating the real network after this many steps.
    pub real_freeze_after: Option<u64>,
    /// Give the score networks RTS blocks.
    pub tru_rts: bool,
    pub gen_lr: f64,
    pub tru_lr: f64,
    /// Adam moment decay rates shared by every optimiser.
    pub beta1: f64,
    pub beta2: f64,
    pub aux: AuxConfig,
    pub seed: u64,
}

impl Default for SjdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            omega: OmegaKind::default(),
            t_lo: 20,
            t_hi: 980,
            update_ratio: 1,
            consistency_space: ConsistencySpace::X0,
            weight: 1.0,
            real_freeze_after: None,
            tru_rts: true,
            gen_lr: 5e-5,
            tru_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            aux: AuxConfig::default(),
            seed: 0,
        }
    }
}

impl SjdConfig {
    pub fn adam(&self, lr: f64) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, ..crate::optim::AdamConfig::default() }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("sjd.lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.t_lo == 0 || self.t_lo > self.t_hi || self.t_hi > sched.steps() {
            return Err(Error::Config(format!("sjd t range [{}, {}] must lie in [1, {}] with t_lo <= t_hi", self.t_lo, self.t_hi, sched.steps())));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if self.update_ratio == 0 {
            return Err(Error::Config("sjd.update_ratio must be >= 1".into()));
        }
        if let OmegaKind::MeanAbs { sigma_norm } = self.omega {
            if !(sigma_norm > 0.0 && sigma_norm.is_finite()) {
                return Err(Error::Config(format!("sjd.sigma_norm must be positive, got {sigma_norm}")));
            }
        }
        Ok(())
    }

    pub fn sample_t(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.t_lo..=self.t_hi)
    }
}

/// Role of a temporal score network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruRole {
    Real,
    Fake,
}

impl TruRole {
    pub fn prefix(&self) -> &'static str {
        match self {
            Self::Real => "tru_real",
            Self::Fake => "tru_fake",
        }
    }
}

/// A score network with the generator UNet's architecture (no adapters),
/// initialised from the generator's base UNet and fully trainable.
pub fn make_tru(g: &Generator, role: TruRole, with_rts: bool) -> Result<Unet> {
    let cfg = UnetConfig { lora_rank: None, rts: if with_rts { Some(g.cfg.unet.rts.unwrap_or_default()) } else { None }, ..g.cfg.unet.clone() };
    let mut tru = Unet::new(&Init::new(0, g.dtype()).sub(role.prefix()), cfg)?;
    let src: std::collections::BTreeMap<String, Tensor> = g
        .unet
        .params()
        .iter()
        .filter(|p| p.kind() == ParamKind::Base)
        .filter_map(|p| p.name().strip_prefix("g.unet.").map(|n| (n.to_string(), p.var().as_tensor().clone())))
        .collect();
    let prefix = format!("{}.", role.prefix());
    let mut res = Ok(());
    tru.visit_mut(&mut |p| {
        if let Some(v) = p.name().strip_prefix(&prefix).and_then(|n| src.get(n)) {
            if res.is_ok() {
                res = p.set(v);
            }
        }
    });
    res?;
    tru.set_trainable_by(&|_| true);
    Ok(tru)
}

/// Normalising weight for a direction tensor.
pub fn omega(direction: &Tensor, kind: OmegaKind) -> Result<f64> {
    match kind {
        OmegaKind::Unit => Ok(1.0),
        OmegaKind::MeanAbs { sigma_norm } => {
            let m = scalar(&direction.abs()?.mean_all()?)?;
            Ok(sigma_norm / (m + OMEGA_EPS))
        }
    }
}

/// `frames[i] - frames[i + 1]`; `None` for a single frame.
pub fn frame_diff(x: &Tensor) -> Result<Option<Tensor>> {
    let n = x.dim(0)?;
    if n < 2 {
        return Ok(None);
    }
    Ok(Some((x.narrow(0, 0, n - 1)? - x.narrow(0, 1, n - 1)?)?))
}

/// One sampled draw shared by every term.
#[derive(Debug, Clone)]
pub struct SjdDraw {
    pub t: usize,
    pub eps: Tensor,
}

impl SjdDraw {
    pub fn sample(cfg: &SjdConfig, shape: &[usize], like: &Tensor, rng: &mut ChaCha8Rng) -> Result<Self> {
        let t = cfg.sample_t(rng);
        Ok(Self { t, eps: randn(rng, shape, like.dtype(), like.device())? })
    }
}

/// Network outputs and the derived stopped-gradient directions for one draw.
#[derive(Debug, Clone)]
pub struct SjdDirections {
    /// `omega * (T_real - T_fake)` on noise predictions.
    pub realistic: Tensor,
    /// `omega * (diff(real) - diff(fake))` in the configured space, or `None` for one frame.
    pub consistency: Option<Tensor>,
    /// Mean absolute values of the unnormalised directions.
    pub realistic_mag: f64,
    pub consistency_mag: f64,
}

/// Evaluates both networks at `z_t` built from the detached `z0` and returns the
/// weighted directions.
pub fn sjd_directions(real: &Unet, fake: &Unet, sched: &NoiseSchedule, z0: &Tensor, draw: &SjdDraw, cfg: &SjdConfig) -> Result<SjdDirections> {
    let zt = diffuse(&z0.detach(), &draw.eps, draw.t, sched)?;
    let fwd = Fwd::default();
    let e_real = real.forward(&zt, draw.t, &fwd)?.detach();
    let e_fake = fake.forward(&zt, draw.t, &fwd)?.detach();
    let dir = (&e_real - &e_fake)?;
    let realistic_mag = scalar(&dir.abs()?.mean_all()?)?;
    let w = omega(&dir, cfg.omega)?;
    let realistic = dir.affine(w, 0.0)?;
    let cons = match cfg.consistency_space {
        ConsistencySpace::Eps => frame_diff(&e_real)?.zip(frame_diff(&e_fake)?),
        ConsistencySpace::X0 => {
            // x0 = (z_t - s eps) / a: the z_t part cancels between networks and the
            // sign flips, so `diff(fake) - diff(real)` keeps the noise-space orientation
            let x_real = predict_clean(&zt, &e_real, draw.t, sched)?;
            let x_fake = predict_clean(&zt, &e_fake, draw.t, sched)?;
            frame_diff(&x_fake)?.zip(frame_diff(&x_real)?)
        }
    };
    let (consistency, consistency_mag) = match cons {
        Some((a, b)) => {
            let c = (a - b)?;
            let mag = scalar(&c.abs()?.mean_all()?)?;
            let w = omega(&c, cfg.omega)?;
            (Some(c.affine(w, 0.0)?), mag)
        }
        None => (None, 0.0),
    };
    Ok(SjdDirections { realistic, consistency, realistic_mag, consistency_mag })
}

/// Surrogate objective terms whose gradients with respect to `z0` are the
/// directions divided by the element count.
#[derive(Debug, Clone)]
pub struct SjdTerms {
    pub realistic: Tensor,
    pub consistency: Tensor,
    /// `realistic + lambda * consistency`.
    pub total: Tensor,
    pub dirs: SjdDirections,
}

pub fn sjd_surrogate(z0: &Tensor, dirs: SjdDirections, lambda: f64) -> Result<SjdTerms> {
    let n = z0.elem_count() as f64;
    let realistic = (dirs.realistic.detach() * z0)?.sum_all()?.affine(1.0 / n, 0.0)?;
    let consistency = match (&dirs.consistency, frame_diff(z0)?) {
        (Some(c), Some(dz)) => (c.detach() * dz)?.sum_all()?.affine(1.0 / n, 0.0)?,
        _ => realistic.zeros_like()?,
    };
    let total = (&realistic + consistency.affine(lambda, 0.0)?)?;
    Ok(SjdTerms { realistic, consistency, total, dirs })
}

/// Generator output frames and their clean latent, through the frozen encoder path.
pub fn latent_of(vae: &Vae, frames_signed: &Tensor) -> Result<Tensor> {
    vae.encode_frames(frames_signed, &Fwd::base())
}

/// Full generator path: forward, encode, sample a draw, build the surrogate.
pub fn sjd_terms(
    g: &Generator,
    real: &Unet,
    fake: &Unet,
    v_lr: &crate::videodata::VideoTensor,
    cfg: &SjdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, SjdTerms, SjdDraw)> {
    let y = g.forward_tensor(v_lr, &Fwd::default())?;
    let z0 = latent_of(&g.vae, &y)?;
    let draw = SjdDraw::sample(cfg, z0.dims(), &z0, rng)?;
    let dirs = sjd_directions(real, fake, &g.sched, &z0, &draw, cfg)?;
    Ok((y, sjd_surrogate(&z0, dirs, cfg.lambda)?, draw))
}

/// Gradient of the distillation update with respect to the generator parameters.
pub fn sjd_generator_gradient(
    g: &Generator,
    real: &Unet,
    fake: &Unet,
    v_lr: &crate::videodata::VideoTensor,
    cfg: &SjdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradStore> {
    let (_, terms, _) = sjd_terms(g, real, fake, v_lr, cfg, rng)?;
    Ok(terms.total.backward()?)
}

/// Denoising loss of a score network on a clean latent: `mse(T(z_t, t), eps)`.
pub fn tru_denoise_loss(tru: &Unet, sched: &NoiseSchedule, z0: &Tensor, cfg: &SjdConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    denoise_loss_with(&|zt, t| tru.forward(zt, t, &Fwd::default()), sched, z0, cfg, rng)
}

/// [`tru_denoise_loss`] for any noise predictor `model(z_t, t)`.
pub fn denoise_loss_with(
    model: &dyn Fn(&Tensor, usize) -> Result<Tensor>,
    sched: &NoiseSchedule,
    z0: &Tensor,
    cfg: &SjdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let draw = SjdDraw::sample(cfg, z0.dims(), z0, rng)?;
    let zt = diffuse(&z0.detach(), &draw.eps, draw.t, sched)?;
    mse(&model(&zt, draw.t)?, &draw.eps)
}
