use candle_core::{DType, Device, Tensor, D};

use crate::{Error, Result};

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // shift invariance makes the detached max gradient-neutral
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `[n, c, h, w] -> [n, c r^2, h/r, w/r]`, channel index `c r^2 + dy r + dx`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Dimension(format!("{h}x{w} not divisible by {r}")));
    }
    Ok(x.reshape(vec![n, c, h / r, r, w / r, r])?.permute(vec![0, 1, 3, 5, 2, 4])?.reshape((n, c * r * r, h / r, w / r))?)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Dimension(format!("{c} channels not divisible by {}", r * r)));
    }
    let c_out = c / (r * r);
    Ok(x.reshape(vec![n, c_out, r, r, h, w])?.permute(vec![0, 1, 4, 2, 5, 3])?.reshape((n, c_out, h * r, w * r))?)
}

/// `x.conv2d(w, padding, stride, 1, 1)` with a workaround for candle 0.9's tiled
/// CPU kernel, which reads a contiguous NCHW input as NHWC when `C == H == W`.
/// Convolving the spatially transposed image with the transposed kernel and
/// transposing back is exact and takes the kernel's strided-copy path instead.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let (_, _, kh, kw) = w.dims4()?;
    let affected = c == h && c == wd && (kh, kw) != (1, 1) && x.is_contiguous();
    if !affected {
        return Ok(x.conv2d(w, padding, stride, 1, 1)?);
    }
    let y = x.transpose(2, 3)?.conv2d(&w.transpose(2, 3)?, padding, stride, 1, 1)?;
    Ok(y.transpose(2, 3)?)
}

/// Nearest-neighbour x2 upsampling via broadcasting, so gradients accumulate correctly.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape(vec![n, c, h, 1, w, 1])?.broadcast_as(vec![n, c, h, 2, w, 2])?.reshape((n, c, 2 * h, 2 * w))?)
}

/// 2x2 mean pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape(vec![n, c, h / 2, 2, w / 2, 2])?.sum(5)?.sum(3)?.affine(0.25, 0.0)?)
}

/// Sinusoidal embedding of an integer timestep, shape `[1, dim]` (`dim` even).
pub fn timestep_embedding(t: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp()).collect();
    v.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    v.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    Ok(Tensor::from_vec(v, (1, dim), device)?.to_dtype(dtype)?)
}

/// Standard normal draws from `rng`, independent of candle's own generator.
pub fn randn(rng: &mut impl rand::Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Mean of squared entries.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Scalar value of a 0-d or 1-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.get(0)?.to_scalar::<f64>()?)
}

/// Flattened tensor values as `f64`.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    scalar(&(a - b)?.abs()?.flatten_all()?.max(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arange(shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        Tensor::arange(0f64, n as f64, &Device::Cpu).unwrap().reshape(shape).unwrap()
    }

    #[test]
    fn shuffle_round_trip_and_layout() {
        let x = arange((2, 3, 4, 6));
        let u = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.dims(), &[2, 12, 2, 3]);
        // channel 1 of input channel 0 is the (dy=0, dx=1) phase
        let v = u.get(0).unwrap().get(1).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(v[0][0], 1.0);
        assert_eq!(v[1][2], 2.0 * 6.0 + 5.0);
        let back = pixel_shuffle(&u, 2).unwrap();
        assert_eq!(max_abs_diff(&back, &x).unwrap(), 0.0);
    }

    #[test]
    fn nearest_upsample_and_pool() {
        let x = arange((1, 1, 2, 2));
        let u = upsample_nearest2(&x).unwrap();
        assert_eq!(u.get(0).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap()[1], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(max_abs_diff(&avg_pool2(&u).unwrap(), &x).unwrap(), 0.0);
    }

    #[test]
    fn upsample_gradient_accumulates() {
        let v = candle_core::Var::from_tensor(&arange((1, 1, 2, 2))).unwrap();
        let y = (upsample_nearest2(v.as_tensor()).unwrap() + upsample_nearest2(v.as_tensor()).unwrap()).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        let gv = to_vec_f64(g.get(v.as_tensor()).unwrap()).unwrap();
        assert_eq!(gv, vec![8.0; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 0.0, -3.0], [0.5, 0.5, 0.5]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn embedding_depends_on_t() {
        let a = timestep_embedding(10, 8, DType::F64, &Device::Cpu).unwrap();
        let b = timestep_embedding(900, 8, DType::F64, &Device::Cpu).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() > 0.1);
    }
}
