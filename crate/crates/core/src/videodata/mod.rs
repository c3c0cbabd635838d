//! Pixel-space video tensors, synthetic scenes, the degradation pipeline, and
//! frame-directory I/O.
//!
//! Videos are stored as `[frames, channels, height, width]` arrays of `f32`
//! in the canonical range `[0, 1]`. Networks see the same data remapped to
//! `[-1, 1]` at the VAE boundary (see [`VideoTensor::to_signed_tensor`]).

mod degrade;
mod io;
pub mod pairs;
pub mod resample;
mod synth;

pub use degrade::{degrade, DegradationRecipe, BLOCK_SIZE};
pub use io::{load_frames, save_frames, Manifest};
pub use synth::{generate_synthetic_video, MotionKind, SceneSpec};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array4, ArrayView3, Axis};

use crate::{Error, Result};

/// Smallest accepted spatial extent.
pub const MIN_SIDE: usize = 8;

/// Closed interval of admissible sample values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A `[frames, channels, height, width]` video with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f32>,
    range: ValueRange,
    frame_rate_hint: Option<f64>,
}

impl VideoTensor {
    /// Wraps `data` in the canonical `[0, 1]` range, validating every invariant.
    pub fn new(data: Array4<f32>) -> Result<Self> {
        Self::with_range(data, ValueRange::UNIT)
    }

    pub fn with_range(data: Array4<f32>, range: ValueRange) -> Result<Self> {
        let (t, c, h, w) = data.dim();
        if t == 0 {
            return Err(Error::Dimension("video must contain at least one frame".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!("channel count must be 1 or 3, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Dimension(format!("frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || !range.contains(**v)) {
            return Err(Error::Numeric(format!("sample {bad} is non-finite or outside [{}, {}]", range.lo, range.hi)));
        }
        Ok(Self { data, range, frame_rate_hint: None })
    }

    /// Clamps into `[0, 1]` (mapping NaN to 0) and wraps the result.
    pub fn from_clamped(mut data: Array4<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn with_frame_rate(mut self, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Parameter(format!("frame rate must be positive, got {fps}")));
        }
        self.frame_rate_hint = Some(fps);
        Ok(self)
    }

    pub fn frame_rate_hint(&self) -> Option<f64> {
        self.frame_rate_hint
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// `(frames, channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    /// Frames `[start, end)` as a new video.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::Parameter(format!("frame range [{start}, {end}) invalid for {} frames", self.frames())));
        }
        Ok(Self { data: self.data.slice(s![start..end, .., .., ..]).to_owned(), range: self.range, frame_rate_hint: self.frame_rate_hint })
    }

    /// The video as a tensor with values in the stored range.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let (t, c, h, w) = self.dims();
        let flat: Vec<f32> = self.data.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (t, c, h, w), device)?.to_dtype(dtype)?)
    }

    /// The video remapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(self.to_tensor(device, dtype)?.affine(2.0, -1.0)?)
    }

    /// Inverse of [`Self::to_signed_tensor`], clamping into `[0, 1]`.
    pub fn from_signed_tensor(t: &Tensor) -> Result<Self> {
        let unit = t.affine(0.5, 0.5)?;
        Self::from_clamped(tensor_to_array4(&unit)?)
    }
}

/// Copies a rank-4 tensor into an `f32` ndarray.
pub fn tensor_to_array4(t: &Tensor) -> Result<Array4<f32>> {
    let (a, b, c, d) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array4::from_shape_vec((a, b, c, d), flat).map_err(|e| Error::Dimension(e.to_string()))
}
