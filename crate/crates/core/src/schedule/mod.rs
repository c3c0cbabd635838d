//! Noise schedule, forward diffusion, and the degradation-aware restoration
//! schedule: factor estimation, timestep matching, and one-step reconstruction.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `alpha_bar(1) = 1 - beta_1`.

mod dem;

pub use dem::{estimate_degradation, frame_statistics, DegradationFactor, FrameStats, D_MIN};

use std::fmt::Write as _;
use std::str::FromStr;

use candle_core::Tensor;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    LinearBeta { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::LinearBeta { beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::LinearBeta { .. } => "linear_beta",
            Self::Cosine { .. } => "cosine",
        }
    }
}

/// Immutable `alpha_bar` table with its square-root companions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Parameter(format!("schedule needs T >= 2, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta { beta_start, beta_end } => {
                (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
            }
            ScheduleKind::Cosine { offset } => {
                let f = |t: f64| ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999)).collect()
            }
        };
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Parameter(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(kind, alpha_bar)
    }

    fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Result<Self> {
        for (i, a) in alpha_bar.iter().enumerate() {
            if !(*a > 0.0 && *a < 1.0) {
                return Err(Error::Parameter(format!("alpha_bar[{}] = {a} outside (0, 1)", i + 1)));
            }
            if i > 0 && *a >= alpha_bar[i - 1] {
                return Err(Error::Parameter(format!("alpha_bar not strictly decreasing at t={}", i + 1)));
            }
        }
        Ok(Self {
            kind,
            sqrt_alpha_bar: alpha_bar.iter().map(|a| a.sqrt()).collect(),
            sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect(),
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Parameter(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `alpha_bar` at 1-based step `t`. Panics when `t` is out of range.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t - 1]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha_bar[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `T=<int>,kind=<string>` header followed by `t,alpha_bar` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("T={},kind={}\n", self.steps(), self.kind.name());
        for (i, a) in self.alpha_bar.iter().enumerate() {
            writeln!(s, "{},{:?}", i + 1, a).expect("write to string");
        }
        s
    }

    /// Parses [`Self::to_text`] output. The kind's generating parameters are not
    /// serialised, so the loaded schedule records the default parameters of its kind.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parameter("empty schedule text".into()))?;
        let bad = |m: String| Error::Parameter(format!("schedule header: {m}"));
        let (t_part, kind_part) = header.split_once(',').ok_or_else(|| bad(header.to_string()))?;
        let steps: usize = t_part.strip_prefix("T=").ok_or_else(|| bad(t_part.to_string()))?.parse().map_err(|e| bad(format!("{e}")))?;
        let kind = match kind_part.strip_prefix("kind=") {
            Some("linear_beta") => ScheduleKind::default(),
            Some("cosine") => ScheduleKind::Cosine { offset: 0.008 },
            _ => return Err(bad(kind_part.to_string())),
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let (t, a) = line.split_once(',').ok_or_else(|| Error::Parameter(format!("malformed schedule line `{line}`")))?;
            let t = usize::from_str(t.trim()).map_err(|e| Error::Parameter(e.to_string()))?;
            if t != i + 1 {
                return Err(Error::Parameter(format!("expected t={}, found t={t}", i + 1)));
            }
            alpha_bar.push(f64::from_str(a.trim()).map_err(|e| Error::Parameter(e.to_string()))?);
        }
        if alpha_bar.len() != steps {
            return Err(Error::Parameter(format!("header says T={steps}, found {} rows", alpha_bar.len())));
        }
        Self::from_alpha_bar(kind, alpha_bar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentRole {
    /// clean latent `z_0`
    Clean,
    /// noised latent `z_t`
    Noisy,
    /// encoded low-resolution input `z_LR`
    LowRes,
    /// reconstructed high-resolution latent `z_HR`
    HighRes,
}

/// A `[frames, channels, h, w]` latent tagged with its role in the pipeline.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    role: LatentRole,
    t: Option<usize>,
}

impl LatentState {
    pub fn new(z: Tensor, role: LatentRole, t: Option<usize>) -> Result<Self> {
        if z.rank() != 4 {
            return Err(Error::Dimension(format!("latent must be rank 4, got {:?}", z.dims())));
        }
        match (role, t) {
            (LatentRole::Noisy, None) => return Err(Error::Parameter("z_t requires a timestep".into())),
            (LatentRole::Noisy, Some(_)) | (_, None) => {}
            (_, Some(_)) => return Err(Error::Parameter(format!("{role:?} latent must not carry a timestep"))),
        }
        ensure_finite(&z, "latent")?;
        Ok(Self { z, role, t })
    }

    pub fn role(&self) -> LatentRole {
        self.role
    }

    pub fn t(&self) -> Option<usize> {
        self.t
    }
}

/// Errors if any element of `x` is NaN or infinite.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let x = x.detach();
    // x - x is zero exactly when every element is finite
    let probe = x.sub(&x)?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if probe == 0.0 {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps` on raw tensors.
pub fn diffuse(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::Dimension(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
    }
    Ok((z0.affine(sched.sqrt_alpha_bar(t), 0.0)? + eps.affine(sched.sqrt_one_minus_alpha_bar(t), 0.0)?)?)
}

pub fn forward_diffuse(z0: &LatentState, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentState> {
    let zt = diffuse(&z0.z, eps, t, sched)?;
    LatentState::new(zt, LatentRole::Noisy, Some(t))
}

/// Noise-prediction inverse of [`diffuse`]: `x0 = (z_t - sqrt(1 - ab) eps) / sqrt(ab)`.
pub fn predict_clean(zt: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let s = sched.sqrt_alpha_bar(t);
    Ok((zt - eps_hat.affine(sched.sqrt_one_minus_alpha_bar(t), 0.0)?)?.affine(1.0 / s, 0.0)?)
}

/// Nearest schedule entry to `d` in `sqrt(alpha_bar)`; ties go to the smaller `t`.
pub fn select_timestep(d: DegradationFactor, sched: &NoiseSchedule) -> usize {
    let d = d.value();
    let s = &sched.sqrt_alpha_bar;
    // s is strictly decreasing: find the first index with s[i] <= d
    let idx = s.partition_point(|&v| v > d);
    let mut best = idx.min(s.len() - 1);
    if idx > 0 {
        let prev = idx - 1;
        if (d - s[prev]).abs() <= (d - s[best]).abs() {
            best = prev;
        }
    }
    best + 1
}

/// `z_HR = (z_LR - sqrt(1 - d^2) est) / d` on raw tensors (differentiable).
pub fn reconstruct(z_lr: &Tensor, est: &Tensor, d: f64) -> Result<Tensor> {
    if z_lr.dims() != est.dims() {
        return Err(Error::Dimension(format!("z_LR {:?} vs est {:?}", z_lr.dims(), est.dims())));
    }
    let c = (1.0 - d * d).max(0.0).sqrt();
    Ok((z_lr - est.affine(c, 0.0)?)?.affine(1.0 / d, 0.0)?)
}

pub fn one_step_reconstruct(z_lr: &LatentState, est: &Tensor, d: DegradationFactor) -> Result<LatentState> {
    let z = reconstruct(&z_lr.z, est, d.value())?;
    ensure_finite(&z, "reconstructed latent")?;
    LatentState::new(z, LatentRole::HighRes, None)
}
