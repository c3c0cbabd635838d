//! Plain-loop reference implementations of the temporal units.

use candle_core::Tensor;
use onestep_vsr::nn::ops::to_vec_f64;
use onestep_vsr::nn::Conv2d;
use onestep_vsr::rts::{RtsAttnUnit, RtsConvUnit};

/// Dense `[t, c, h, w]` array in f64.
#[derive(Clone, Debug)]
pub struct Vol {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Vol {
    pub fn zeros(t: usize, c: usize, h: usize, w: usize) -> Self {
        Self { t, c, h, w, v: vec![0.0; t * c * h * w] }
    }

    pub fn of(x: &Tensor) -> Self {
        let (t, c, h, w) = x.dims4().unwrap();
        Self { t, c, h, w, v: to_vec_f64(x).unwrap() }
    }

    fn idx(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.c + c) * self.h + y) * self.w + x
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[self.idx(t, c, y, x)]
    }

    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, val: f64) {
        let i = self.idx(t, c, y, x);
        self.v[i] = val;
    }
}

/// Stride-1 "same" convolution with bias, by loops.
pub fn conv(x: &Vol, layer: &Conv2d) -> Vol {
    let wt = layer.weight.tensor();
    let (co, ci, k, _) = wt.dims4().unwrap();
    let w = to_vec_f64(&wt).unwrap();
    let b = to_vec_f64(&layer.bias.tensor()).unwrap();
    assert_eq!(ci, x.c);
    let pad = (k / 2) as isize;
    let mut out = Vol::zeros(x.t, co, x.h, x.w);
    for t in 0..x.t {
        for o in 0..co {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                acc += w[((o * ci + c) * k + ky) * k + kx] * x.at(t, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(t, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Reduce, shift the three channel segments by `+1, 0, -1` frames, two 3x3 convs
/// with ReLU between, expand, add the input.
pub fn conv_unit(u: &RtsConvUnit, x: &Vol) -> Vol {
    let f = conv(x, &u.reduce);
    let seg = f.c / 3;
    let mut agg = Vol::zeros(f.t, f.c, f.h, f.w);
    for t in 0..f.t {
        for c in 0..f.c {
            let src = match c / seg {
                0 => t.checked_sub(1),
                1 => Some(t),
                _ => Some(t + 1).filter(|&s| s < f.t),
            };
            if let Some(s) = src {
                for y in 0..f.h {
                    for xx in 0..f.w {
                        agg.set(t, c, y, xx, f.at(s, c, y, xx));
                    }
                }
            }
        }
    }
    let mut h = conv(&agg, &u.inner1);
    h.v.iter_mut().for_each(|v| *v = v.max(0.0));
    let h = conv(&h, &u.inner2);
    let e = conv(&h, &u.expand);
    let mut out = x.clone();
    out.v.iter_mut().zip(&e.v).for_each(|(o, d)| *o += d);
    out
}

/// For each frame `i` and position `p`: sum over `j in {-1,0,1}` of attention of
/// `q_i[p]` over all positions of frame `i+j`; absent frames contribute nothing.
pub fn attn_unit(u: &RtsAttnUnit, x: &Vol) -> Vol {
    let r = u.dim();
    let qkv = conv(x, &u.qkv);
    let hw = x.h * x.w;
    let get = |part: usize, t: usize, p: usize, d: usize| qkv.at(t, part * r + d, p / x.w, p % x.w);
    let mut msa = Vol::zeros(x.t, r, x.h, x.w);
    let scale = 1.0 / (r as f64).sqrt();
    for i in 0..x.t {
        for p in 0..hw {
            let mut acc = vec![0.0; r];
            for j in [-1i64, 0, 1] {
                let s = i as i64 + j;
                if s < 0 || s >= x.t as i64 {
                    continue;
                }
                let s = s as usize;
                let scores: Vec<f64> = (0..hw).map(|q| (0..r).map(|d| get(0, i, p, d) * get(1, s, q, d)).sum::<f64>() * scale).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (q, eq) in e.iter().enumerate() {
                    for (d, a) in acc.iter_mut().enumerate() {
                        *a += eq / z * get(2, s, q, d);
                    }
                }
            }
            for (d, a) in acc.iter().enumerate() {
                msa.set(i, d, p / x.w, p % x.w, *a);
            }
        }
    }
    let e = conv(&msa, &u.out_proj);
    let mut out = x.clone();
    out.v.iter_mut().zip(&e.v).for_each(|(o, d)| *o += d);
    out
}

pub fn max_abs(a: &Vol, b: &Vol) -> f64 {
    assert_eq!((a.t, a.c, a.h, a.w), (b.t, b.c, b.h, b.w));
    a.v.iter().zip(&b.v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
