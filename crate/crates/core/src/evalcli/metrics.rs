//! Full-reference video metrics on unit-range videos.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::videodata::VideoTensor;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("videos differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsnrReport {
    /// `+inf` for identical frames.
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

/// `10 log10(1 / MSE)` per frame with peak 1.
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<PsnrReport> {
    check_shapes(a, b)?;
    let per_frame: Vec<f64> = (0..a.frames())
        .map(|i| {
            let (fa, fb) = (a.frame(i), b.frame(i));
            let se: f64 = fa.iter().zip(fb.iter()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
            let mse = se / fa.len() as f64;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                -10.0 * mse.log10()
            }
        })
        .collect();
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(PsnrReport { per_frame, mean })
}

/// SSIM map mean of one plane pair, Gaussian window, valid region only.
pub fn ssim_plane(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, window: usize, k1: f64, k2: f64) -> Result<f64> {
    let (h, w) = a.dim();
    if h < window || w < window {
        return Err(Error::Dimension(format!("SSIM needs frames of at least {window}x{window}, got {h}x{w}")));
    }
    let sigma = SSIM_SIGMA * window as f64 / SSIM_WINDOW as f64;
    let half = (window / 2) as isize;
    let g: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / norm).collect();
    let filt = |x: &Array2<f64>| -> Array2<f64> {
        let (h, w) = x.dim();
        let (oh, ow) = (h - window + 1, w - window + 1);
        let mut rows = Array2::<f64>::zeros((oh, w));
        for i in 0..oh {
            for j in 0..w {
                rows[[i, j]] = (0..window).map(|k| g[k] * x[[i + k, j]]).sum();
            }
        }
        let mut out = Array2::<f64>::zeros((oh, ow));
        for i in 0..oh {
            for j in 0..ow {
                out[[i, j]] = (0..window).map(|k| g[k] * rows[[i, j + k]]).sum();
            }
        }
        out
    };
    let (a, b) = (a.to_owned(), b.to_owned());
    let (c1, c2) = (k1 * k1, k2 * k2);
    let mu_a = filt(&a);
    let mu_b = filt(&b);
    let saa = filt(&(&a * &a)) - &mu_a * &mu_a;
    let sbb = filt(&(&b * &b)) - &mu_b * &mu_b;
    let sab = filt(&(&a * &b)) - &mu_a * &mu_b;
    let num = (2.0 * &mu_a * &mu_b + c1) * (2.0 * &sab + c2);
    let den = (&mu_a * &mu_a + &mu_b * &mu_b + c1) * (saa + sbb + c2);
    Ok((num / den).mean().expect("non-empty SSIM map"))
}

/// Mean SSIM over frames and channels (each channel scored separately).
pub fn ssim_with(a: &VideoTensor, b: &VideoTensor, window: usize, k1: f64, k2: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..a.frames() {
        for c in 0..a.channels() {
            let pa = a.data().slice(s![i, c, .., ..]).mapv(f64::from);
            let pb = b.data().slice(s![i, c, .., ..]).mapv(f64::from);
            total += ssim_plane(pa.view(), pb.view(), window, k1, k2)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

/// Mean over frame pairs and elements of `|(out[i+1]-out[i]) - (gt[i+1]-gt[i])|`.
pub fn flicker_score(v_out: &VideoTensor, v_gt: &VideoTensor) -> Result<f64> {
    check_shapes(v_out, v_gt)?;
    let n = v_out.frames();
    if n < 2 {
        return Err(Error::Parameter(format!("flicker needs at least two frames, got {n}")));
    }
    let (o, g) = (v_out.data(), v_gt.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n - 1 {
        let (o0, o1) = (o.index_axis(Axis(0), i), o.index_axis(Axis(0), i + 1));
        let (g0, g1) = (g.index_axis(Axis(0), i), g.index_axis(Axis(0), i + 1));
        for (((a0, a1), b0), b1) in o0.iter().zip(o1.iter()).zip(g0.iter()).zip(g1.iter()) {
            total += ((*a1 as f64 - *a0 as f64) - (*b1 as f64 - *b0 as f64)).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr: PsnrReport,
    pub ssim: f64,
    /// `None` for single-frame videos.
    pub flicker: Option<f64>,
    pub frames: usize,
}

impl MetricReport {
    pub fn compute(pred: &VideoTensor, gt: &VideoTensor) -> Result<Self> {
        Ok(Self {
            psnr: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
            flicker: if pred.frames() >= 2 { Some(flicker_score(pred, gt)?) } else { None },
            frames: pred.frames(),
        })
    }

    /// `metric,value` lines; per-frame PSNR follows the summary lines.
    pub fn to_text(&self) -> String {
        let fmt = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.6}") };
        let mut s = format!("frames,{}\npsnr,{}\nssim,{:.6}\n", self.frames, fmt(self.psnr.mean), self.ssim);
        if let Some(f) = self.flicker {
            s.push_str(&format!("flicker,{f:.6}\n"));
        }
        for (i, p) in self.psnr.per_frame.iter().enumerate() {
            s.push_str(&format!("psnr_frame_{i},{}\n", fmt(*p)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn vid(f: impl Fn(usize, usize, usize, usize) -> f32, dims: (usize, usize, usize, usize)) -> VideoTensor {
        VideoTensor::new(Array4::from_shape_fn(dims, |(t, c, y, x)| f(t, c, y, x))).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = vid(|t, c, y, x| ((t + c + y + x) % 5) as f32 * 0.1, (3, 3, 16, 16));
        assert!(psnr(&a, &a).unwrap().mean.is_infinite());
        let b = vid(|t, c, y, x| ((t + c + y + x) % 5) as f32 * 0.1 + 0.1, (3, 3, 16, 16));
        for p in psnr(&a, &b).unwrap().per_frame {
            assert!((p - 20.0).abs() < 1e-4, "{p}");
        }
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_examples() {
        let a = vid(|_, _, y, x| ((y + x) % 2) as f32, (1, 3, 16, 16));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = vid(|_, _, y, x| 1.0 - ((y + x) % 2) as f32, (1, 3, 16, 16));
        // Independent numpy evaluation of the same definition.
        let v = ssim(&a, &inv).unwrap();
        assert!(v < 0.2);
        assert!((v - -0.9964064683569569).abs() < 1e-9, "{v}");
        let c = vid(|_, _, _, _| 0.3, (1, 3, 16, 16));
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let small = vid(|_, _, _, _| 0.3, (1, 3, 8, 8));
        assert!(matches!(ssim(&small, &small), Err(Error::Dimension(_))));
    }

    #[test]
    fn flicker_examples() {
        let g = vid(|t, c, y, x| ((t * 3 + c + y * x) % 7) as f32 / 7.0, (4, 3, 8, 8));
        assert_eq!(flicker_score(&g, &g).unwrap(), 0.0);
        let off = vid(|t, c, y, x| ((t * 3 + c + y * x) % 7) as f32 / 7.0 * 0.5 + 0.25, (4, 3, 8, 8));
        let half = vid(|t, c, y, x| ((t * 3 + c + y * x) % 7) as f32 / 7.0 * 0.5, (4, 3, 8, 8));
        assert!(flicker_score(&off, &half).unwrap() < 1e-6);
        let mut noisy = g.data().clone();
        let mut state = 12345u64;
        noisy.index_axis_mut(Axis(0), 2).mapv_inplace(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        });
        let noisy = VideoTensor::new(noisy).unwrap();
        assert!(flicker_score(&noisy, &g).unwrap() > flicker_score(&g, &g).unwrap());
        assert!(matches!(flicker_score(&g.slice_frames(0, 1).unwrap(), &g.slice_frames(0, 1).unwrap()), Err(Error::Parameter(_))));
    }
}
