//! Separable resampling filters.
//!
//! The cubic kernel is Keys' convolution kernel with `a = -0.5`:
//!
//! ```text
//! k(x) = (a+2)|x|^3 - (a+3)|x|^2 + 1          for |x| <= 1
//!        a|x|^3 - 5a|x|^2 + 8a|x| - 4a        for 1 < |x| < 2
//!        0                                      otherwise
//! ```
//!
//! Output sample `o` is centred at input coordinate `(o + 0.5) / scale - 0.5`.
//! When downscaling, the kernel is stretched by `1 / scale` (antialiased,
//! MATLAB-style). Taps falling outside the frame replicate the edge sample and
//! each row of weights is normalised to sum to one.

use ndarray::{Array2, Array4, ArrayView2, Axis};

use crate::{Error, Result};

pub const CUBIC_A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Sparse row-normalised weights: for each output index, `(input index, weight)` taps.
#[derive(Debug, Clone)]
pub struct Taps {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Taps {
    pub fn cubic_resize(n_in: usize, n_out: usize) -> Self {
        let scale = n_out as f64 / n_in as f64;
        let stretch = if scale < 1.0 { scale } else { 1.0 };
        let support = 2.0 / stretch;
        let rows = (0..n_out)
            .map(|o| {
                let centre = (o as f64 + 0.5) / scale - 0.5;
                let lo = (centre - support).floor() as i64;
                let hi = (centre + support).ceil() as i64;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                for k in lo..=hi {
                    let w = cubic((centre - k as f64) * stretch);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = k.clamp(0, n_in as i64 - 1) as usize;
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
                normalise(taps)
            })
            .collect();
        Self { rows }
    }

    /// Gaussian taps of radius `ceil(3 sigma)`; `sigma == 0` yields the identity.
    pub fn gaussian(n: usize, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return Self { rows: (0..n).map(|i| vec![(i, 1.0)]).collect() };
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let rows = (0..n as i64)
            .map(|i| {
                let mut taps: Vec<(usize, f64)> = Vec::new();
                for k in -radius..=radius {
                    let w = (-(k * k) as f64 / (2.0 * sigma * sigma)).exp();
                    let idx = (i + k).clamp(0, n as i64 - 1) as usize;
                    match taps.iter_mut().find(|(j, _)| *j == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
                normalise(taps)
            })
            .collect();
        Self { rows }
    }

    pub fn len_out(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(i, w)| w * input[i]).sum();
        }
    }
}

fn normalise(mut taps: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let total: f64 = taps.iter().map(|t| t.1).sum();
    for t in &mut taps {
        t.1 /= total;
    }
    taps
}

/// Applies separable filters to one plane: rows first, then columns.
pub fn filter_plane(plane: ArrayView2<'_, f32>, rows: &Taps, cols: &Taps) -> Array2<f32> {
    let (h, w) = plane.dim();
    let (oh, ow) = (rows.len_out(), cols.len_out());
    let mut tmp = Array2::<f64>::zeros((h, ow));
    let mut line_in = vec![0.0; w];
    let mut line_out = vec![0.0; ow];
    for y in 0..h {
        for x in 0..w {
            line_in[x] = plane[[y, x]] as f64;
        }
        cols.apply(&line_in, &mut line_out);
        for x in 0..ow {
            tmp[[y, x]] = line_out[x];
        }
    }
    let mut out = Array2::<f32>::zeros((oh, ow));
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; oh];
    for x in 0..ow {
        for y in 0..h {
            col_in[y] = tmp[[y, x]];
        }
        rows.apply(&col_in, &mut col_out);
        for y in 0..oh {
            out[[y, x]] = col_out[y] as f32;
        }
    }
    out
}

fn map_planes(video: &Array4<f32>, rows: &Taps, cols: &Taps) -> Array4<f32> {
    let (t, c, _, _) = video.dim();
    let mut out = Array4::<f32>::zeros((t, c, rows.len_out(), cols.len_out()));
    for (mut dst_f, src_f) in out.outer_iter_mut().zip(video.outer_iter()) {
        for (mut dst, src) in dst_f.outer_iter_mut().zip(src_f.outer_iter()) {
            dst.assign(&filter_plane(src, rows, cols));
        }
    }
    out
}

/// Cubic resize of every plane to `(out_h, out_w)`.
pub fn resize_cubic(video: &Array4<f32>, out_h: usize, out_w: usize) -> Result<Array4<f32>> {
    let (_, _, h, w) = video.dim();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize target must be non-empty".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(video.clone());
    }
    Ok(map_planes(video, &Taps::cubic_resize(h, out_h), &Taps::cubic_resize(w, out_w)))
}

/// Integer-factor cubic upscale (`factor == 1` is an exact copy).
pub fn upscale_cubic(video: &Array4<f32>, factor: usize) -> Result<Array4<f32>> {
    let (_, _, h, w) = video.dim();
    resize_cubic(video, h * factor, w * factor)
}

/// Isotropic Gaussian blur with replicated borders.
pub fn gaussian_blur(video: &Array4<f32>, sigma: f64) -> Array4<f32> {
    if sigma <= 0.0 {
        return video.clone();
    }
    let (_, _, h, w) = video.dim();
    map_planes(video, &Taps::gaussian(h, sigma), &Taps::gaussian(w, sigma))
}

/// Mean over `block x block` tiles (edge tiles may be partial), broadcast back.
pub fn block_means(plane: ArrayView2<'_, f32>, block: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let ye = (by + block).min(h);
            let xe = (bx + block).min(w);
            let tile = plane.slice(ndarray::s![by..ye, bx..xe]);
            let mean = tile.iter().map(|&v| v as f64).sum::<f64>() / tile.len() as f64;
            out.slice_mut(ndarray::s![by..ye, bx..xe]).fill(mean as f32);
        }
    }
    out
}

/// Mean of the channel axis, used for luminance-free statistics.
pub fn channel_mean(frame: ndarray::ArrayView3<'_, f32>) -> Array2<f32> {
    frame.mean_axis(Axis(0)).expect("non-empty channel axis")
}
