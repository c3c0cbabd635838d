use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::resample::{block_means, gaussian_blur, resize_cubic};
use super::VideoTensor;
use crate::{Error, Result};

/// Tile size of the block-averaging artifact, in output pixels.
pub const BLOCK_SIZE: usize = 4;

/// Fixed-order degradation: blur, cubic downscale, Gaussian noise, block averaging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationRecipe {
    pub blur_sigma: f64,
    pub downscale_factor: usize,
    pub noise_sigma: f64,
    pub block_artifact_strength: f64,
    pub seed: u64,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self::identity()
    }
}

impl DegradationRecipe {
    pub fn identity() -> Self {
        Self { blur_sigma: 0.0, downscale_factor: 1, noise_sigma: 0.0, block_artifact_strength: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::Parameter(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        if self.downscale_factor == 0 {
            return Err(Error::Parameter("downscale_factor must be >= 1".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Parameter(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.block_artifact_strength) {
            return Err(Error::Parameter(format!("block_artifact_strength must lie in [0, 1], got {}", self.block_artifact_strength)));
        }
        Ok(())
    }

    /// Parses `key=value` lines naming the recipe fields. Missing keys keep
    /// their identity value; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::identity();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("bad value for `{k}`: {e}"));
            match k {
                "blur_sigma" => r.blur_sigma = v.parse().map_err(|e| bad(&e))?,
                "downscale_factor" => r.downscale_factor = v.parse().map_err(|e| bad(&e))?,
                "noise_sigma" => r.noise_sigma = v.parse().map_err(|e| bad(&e))?,
                "block_artifact_strength" => r.block_artifact_strength = v.parse().map_err(|e| bad(&e))?,
                "seed" => r.seed = v.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::UnknownKey(other.to_string())),
            }
        }
        r.validate()?;
        Ok(r)
    }

    pub fn to_text(&self) -> String {
        format!(
            "blur_sigma={}\ndownscale_factor={}\nnoise_sigma={}\nblock_artifact_strength={}\nseed={}\n",
            self.blur_sigma, self.downscale_factor, self.noise_sigma, self.block_artifact_strength, self.seed
        )
    }
}

/// Applies `recipe` to every frame. Noise is drawn from a single stream seeded
/// by `recipe.seed`, frame after frame, so realisations differ between frames.
pub fn degrade(video: &VideoTensor, recipe: &DegradationRecipe) -> Result<VideoTensor> {
    recipe.validate()?;
    let (_, _, h, w) = video.dims();
    let f = recipe.downscale_factor;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Dimension(format!("{h}x{w} frames are not divisible by downscale factor {f}")));
    }
    let mut x: Array4<f32> = gaussian_blur(video.data(), recipe.blur_sigma);
    if f > 1 {
        x = resize_cubic(&x, h / f, w / f)?;
    }
    if recipe.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
        for v in x.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = (*v as f64 + recipe.noise_sigma * n) as f32;
        }
    }
    let s = recipe.block_artifact_strength;
    if s > 0.0 {
        for mut frame in x.outer_iter_mut() {
            for mut plane in frame.outer_iter_mut() {
                let means = block_means(plane.view(), BLOCK_SIZE);
                plane.zip_mut_with(&means, |p, m| *p = ((1.0 - s) * *p as f64 + s * *m as f64) as f32);
            }
        }
    }
    VideoTensor::from_clamped(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videodata::{generate_synthetic_video, MotionKind, SceneSpec};
    use proptest::prelude::*;

    fn clip() -> VideoTensor {
        generate_synthetic_video(&SceneSpec { n_frames: 3, height: 32, width: 32, motion: MotionKind::Mixed, seed: 3 }).unwrap()
    }

    #[test]
    fn identity_recipe_is_identity() {
        let v = clip();
        assert_eq!(degrade(&v, &DegradationRecipe::identity()).unwrap(), v);
    }

    #[test]
    fn downscale_shape() {
        let v = generate_synthetic_video(&SceneSpec { n_frames: 2, height: 64, width: 64, motion: MotionKind::Translate, seed: 1 }).unwrap();
        let r = DegradationRecipe { downscale_factor: 4, ..DegradationRecipe::identity() };
        assert_eq!(degrade(&v, &r).unwrap().dims(), (2, 3, 16, 16));
    }

    #[test]
    fn indivisible_is_dimension_error() {
        let r = DegradationRecipe { downscale_factor: 3, ..DegradationRecipe::identity() };
        assert!(matches!(degrade(&clip(), &r), Err(Error::Dimension(_))));
    }

    #[test]
    fn noise_residual_std_matches_sigma() {
        // mid-grey keeps clamping negligible at 5 sigma
        let v = VideoTensor::new(Array4::from_elem((10, 3, 64, 64), 0.5f32)).unwrap();
        let r = DegradationRecipe { noise_sigma: 0.1, seed: 11, ..DegradationRecipe::identity() };
        let out = degrade(&v, &r).unwrap();
        let n = out.data().len() as f64;
        assert!(n >= 1e5);
        let res: Vec<f64> = out.data().iter().map(|&x| x as f64 - 0.5).collect();
        let mean = res.iter().sum::<f64>() / n;
        let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() <= 0.01, "std={std}");
    }

    #[test]
    fn noise_varies_across_frames() {
        let v = VideoTensor::new(Array4::from_elem((2, 1, 8, 8), 0.5f32)).unwrap();
        let r = DegradationRecipe { noise_sigma: 0.05, seed: 2, ..DegradationRecipe::identity() };
        let out = degrade(&v, &r).unwrap();
        assert_ne!(out.frame(0), out.frame(1));
    }

    #[test]
    fn recipe_text_round_trip_and_unknown_key() {
        let r = DegradationRecipe { blur_sigma: 1.25, downscale_factor: 4, noise_sigma: 0.05, block_artifact_strength: 0.2, seed: 9 };
        assert_eq!(DegradationRecipe::parse(&r.to_text()).unwrap(), r);
        assert!(matches!(DegradationRecipe::parse("blur=1"), Err(Error::UnknownKey(k)) if k == "blur"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_in_range_and_deterministic(
            blur in 0.0f64..3.0,
            factor in prop::sample::select(vec![1usize, 2, 4]),
            noise in 0.0f64..0.5,
            block in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let r = DegradationRecipe { blur_sigma: blur, downscale_factor: factor, noise_sigma: noise, block_artifact_strength: block, seed };
            let v = clip();
            let a = degrade(&v, &r).unwrap();
            let b = degrade(&v, &r).unwrap();
            prop_assert!(a.data().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
            prop_assert_eq!(a, b);
        }
    }
}
