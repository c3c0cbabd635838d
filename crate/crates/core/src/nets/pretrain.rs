//! Base-network pretraining that stands in for a pretrained latent prior:
//! an autoencoder fit on clean frames, then a noise-prediction UNet on its latents.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Generator, Unet, Vae};
use crate::nn::ops::{mse, randn, scalar};
use crate::nn::{Fwd, Module};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{diffuse, NoiseSchedule};
use crate::videodata::pairs::PairSource;
use crate::videodata::VideoTensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub unet_steps: usize,
    pub unet_lr: f64,
    /// Clips used to estimate the latent scale.
    pub scale_clips: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { vae_steps: 2000, vae_lr: 2e-3, unet_steps: 1500, unet_lr: 1e-3, scale_clips: 16, seed: 0 }
    }
}

fn adam(lr: f64) -> Adam {
    Adam::new(AdamConfig { lr, ..AdamConfig::default() })
}

/// Cosine decay from `lr` to `lr / 20` over `steps`.
pub fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    let p = step as f64 / steps.max(1) as f64;
    let lo = lr / 20.0;
    lo + (lr - lo) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Reconstruction loss of the base autoencoder (no adapters, no RTS) on one clip.
pub fn vae_loss(vae: &Vae, gt: &VideoTensor) -> Result<Tensor> {
    let w = vae.dec_in.weight.tensor();
    let x = gt.to_signed_tensor(w.device(), DType::F32)?;
    let fwd = Fwd::base();
    let y = vae.decode(&vae.encode_frames(&x, &fwd)?, &fwd)?;
    mse(&y, &x)
}

/// Fits the autoencoder on ground-truth clips; returns per-step losses.
pub fn pretrain_vae(vae: &mut Vae, source: &mut PairSource, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut opt = adam(lr);
    let mut losses = Vec::with_capacity(steps);
    for i in 0..steps {
        let Some(pair) = source.next() else { break };
        let (_, gt) = pair?;
        opt.cfg.lr = cosine_lr(lr, i, steps);
        let loss = vae_loss(vae, &gt)?;
        let grads = loss.backward()?;
        opt.step(&vae.trainable_params(), &grads)?;
        losses.push(scalar(&loss)?);
    }
    Ok(losses)
}

/// Sets the latent scale so encoded ground truth has unit standard deviation.
pub fn calibrate_latent_scale(vae: &mut Vae, source: &PairSource, clips: usize) -> Result<f64> {
    vae.latent_scale = 1.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for i in 0..clips.max(1) as u64 {
        let (_, gt) = source.pair(i)?;
        let z = vae.encode(&gt, &Fwd::base())?.z;
        let v = crate::nn::ops::to_vec_f64(&z)?;
        n += v.len();
        sum += v.iter().sum::<f64>();
        sq += v.iter().map(|x| x * x).sum::<f64>();
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
    vae.latent_scale = 1.0 / std;
    Ok(vae.latent_scale)
}

/// Noise-prediction loss of `unet` on clean latents `z0` at a sampled timestep.
pub fn denoise_loss(unet: &Unet, sched: &NoiseSchedule, z0: &Tensor, t: usize, rng: &mut ChaCha8Rng, fwd: &Fwd) -> Result<Tensor> {
    let eps = randn(rng, z0.dims(), z0.dtype(), z0.device())?;
    let zt = diffuse(z0, &eps, t, sched)?;
    mse(&unet.forward(&zt, t, fwd)?, &eps)
}

/// Trains the base UNet to predict noise on ground-truth latents.
pub fn pretrain_unet(unet: &mut Unet, vae: &Vae, sched: &NoiseSchedule, source: &mut PairSource, steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    let mut opt = adam(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    for i in 0..steps {
        let Some(pair) = source.next() else { break };
        let (_, gt) = pair?;
        opt.cfg.lr = cosine_lr(lr, i, steps);
        let z0 = vae.encode(&gt, &Fwd::base())?.z.detach();
        let t = rng.random_range(1..=sched.steps());
        let loss = denoise_loss(unet, sched, &z0, t, &mut rng, &Fwd::base())?;
        let grads = loss.backward()?;
        opt.step(&unet.trainable_params(), &grads)?;
        losses.push(scalar(&loss)?);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub vae_losses: Vec<f64>,
    pub unet_losses: Vec<f64>,
    pub latent_scale: f64,
}

/// Full base pretraining of a generator's VAE and UNet, leaving the base frozen.
pub fn pretrain_generator(g: &mut Generator, source: &PairSource, cfg: &PretrainConfig) -> Result<PretrainReport> {
    g.unfreeze_all();
    let mut src = source.clone();
    src.seek(0);
    let vae_losses = pretrain_vae(&mut g.vae, &mut src, cfg.vae_steps, cfg.vae_lr)?;
    let latent_scale = calibrate_latent_scale(&mut g.vae, source, cfg.scale_clips)?;
    let unet_losses = pretrain_unet(&mut g.unet, &g.vae, &g.sched, &mut src, cfg.unet_steps, cfg.unet_lr, cfg.seed)?;
    g.freeze_base();
    Ok(PretrainReport { vae_losses, unet_losses, latent_scale })
}
