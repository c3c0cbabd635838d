//! Hand-crafted degradation estimator.
//!
//! Per frame, on luminance `y`:
//! - `sigma` is Immerkaer's noise estimate (mean absolute response of the
//!   3x3 second-difference mask, scaled by `sqrt(pi/2) / 6`);
//! - `sharp` is the ratio of 5-point Laplacian energy at pixel spacing 1 to
//!   that at spacing 2, each with the white-noise share `20 sigma^2` removed;
//! - `conf = snr / (1 + snr)` where `snr` is the corrected coarse energy over
//!   the noise energy.
//!
//! The per-frame factor is `d_min + (1 - d_min) * q_sharp * conf * q_noise` with
//! `q_sharp` a clamped linear ramp of `sharp` over `[1/16, SHARP_HI]` and
//! `q_noise = exp(-(sigma / NOISE_SCALE)^2)`. The clip factor is the mean over frames.

use ndarray::{Array2, ArrayView2};

use crate::videodata::VideoTensor;
use crate::{Error, Result};

pub const D_MIN: f64 = 0.05;

const SHARP_LO: f64 = 1.0 / 16.0;
const SHARP_HI: f64 = 0.17;
const NOISE_SCALE: f64 = 0.1;
const VAR_EPS: f64 = 1e-6;

/// Degradation factor `d` in `(0, 1]`; 1 is pristine.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DegradationFactor(f64);

impl DegradationFactor {
    pub fn new(d: f64) -> Result<Self> {
        if d > 0.0 && d <= 1.0 {
            Ok(Self(d))
        } else {
            Err(Error::Parameter(format!("degradation factor must lie in (0, 1], got {d}")))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    pub var_y: f64,
    pub var_lap: f64,
    pub var_lap_coarse: f64,
    pub noise_sigma: f64,
}

impl FrameStats {
    fn noise_energy(&self) -> f64 {
        20.0 * self.noise_sigma.powi(2)
    }

    /// Noise-corrected fine-to-coarse Laplacian energy ratio. Equals 1/16 for
    /// locally quadratic content and grows with edge sharpness.
    pub fn sharpness(&self) -> f64 {
        let n = self.noise_energy();
        (self.var_lap - n).max(0.0) / ((self.var_lap_coarse - n).max(0.0) + VAR_EPS)
    }

    /// Confidence in [`Self::sharpness`]: coarse detail energy over noise energy, squashed to [0, 1).
    pub fn detail_confidence(&self) -> f64 {
        let n = self.noise_energy();
        let snr = (self.var_lap_coarse - n).max(0.0) / (n + VAR_EPS * VAR_EPS);
        snr / (1.0 + snr)
    }

    pub fn factor(&self) -> f64 {
        let q_sharp = ((self.sharpness() - SHARP_LO) / (SHARP_HI - SHARP_LO)).clamp(0.0, 1.0);
        let q_noise = (-(self.noise_sigma / NOISE_SCALE).powi(2)).exp();
        (D_MIN + (1.0 - D_MIN) * q_sharp * self.detail_confidence() * q_noise).clamp(D_MIN, 1.0)
    }
}

fn luminance(video: &VideoTensor, i: usize) -> Array2<f64> {
    let frame = video.frame(i);
    let (c, h, w) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 1 {
            frame[[0, y, x]] as f64
        } else {
            0.299 * frame[[0, y, x]] as f64 + 0.587 * frame[[1, y, x]] as f64 + 0.114 * frame[[2, y, x]] as f64
        }
    })
}

fn variance(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Statistics of one luminance plane, computed over the valid interior.
pub fn plane_statistics(y: ArrayView2<'_, f64>) -> FrameStats {
    let (h, w) = y.dim();
    let mut lap = Vec::with_capacity((h - 2) * (w - 2));
    let mut coarse = Vec::new();
    for r in 2..h.saturating_sub(2) {
        for c in 2..w.saturating_sub(2) {
            coarse.push(y[[r - 2, c]] + y[[r + 2, c]] + y[[r, c - 2]] + y[[r, c + 2]] - 4.0 * y[[r, c]]);
        }
    }
    let mut abs_mask = 0.0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let n4 = y[[r - 1, c]] + y[[r + 1, c]] + y[[r, c - 1]] + y[[r, c + 1]];
            let diag = y[[r - 1, c - 1]] + y[[r - 1, c + 1]] + y[[r + 1, c - 1]] + y[[r + 1, c + 1]];
            lap.push(n4 - 4.0 * y[[r, c]]);
            abs_mask += (diag - 2.0 * n4 + 4.0 * y[[r, c]]).abs();
        }
    }
    let count = lap.len() as f64;
    FrameStats {
        var_y: variance(y.iter().copied()),
        var_lap: variance(lap.into_iter()),
        var_lap_coarse: variance(coarse.into_iter()),
        noise_sigma: (std::f64::consts::FRAC_PI_2).sqrt() * abs_mask / (6.0 * count),
    }
}

pub fn frame_statistics(video: &VideoTensor) -> Vec<FrameStats> {
    (0..video.frames()).map(|i| plane_statistics(luminance(video, i).view())).collect()
}

/// Clip-level degradation factor: mean of per-frame factors, floored at [`D_MIN`].
pub fn estimate_degradation(video_lr: &VideoTensor) -> DegradationFactor {
    let stats = frame_statistics(video_lr);
    let d = stats.iter().map(FrameStats::factor).sum::<f64>() / stats.len() as f64;
    DegradationFactor(d.clamp(D_MIN, 1.0))
}
