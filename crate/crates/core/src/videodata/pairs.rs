//! Deterministic stream of `(LR, GT)` training pairs.
//!
//! Clip `i` of a source is a function of `(seed, i)` only, so every consumer
//! sees the same data in the same order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{degrade, generate_synthetic_video, DegradationRecipe, MotionKind, SceneSpec, VideoTensor};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub n_frames: usize,
    /// Ground-truth side length.
    pub hr_size: usize,
    pub factor: usize,
    pub motion: MotionKind,
    pub max_blur: f64,
    pub max_noise: f64,
    pub max_block: f64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { n_frames: 6, hr_size: 32, factor: 4, motion: MotionKind::Mixed, max_blur: 1.5, max_noise: 0.05, max_block: 0.3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct PairSource {
    pub cfg: PairConfig,
    next: u64,
    /// Clips past this index are not produced.
    limit: Option<u64>,
}

impl PairSource {
    pub fn new(cfg: PairConfig) -> Self {
        Self { cfg, next: 0, limit: None }
    }

    pub fn with_limit(mut self, n: u64) -> Self {
        self.limit = Some(n);
        self
    }

    /// The index of the next clip to be produced.
    pub fn cursor(&self) -> u64 {
        self.next
    }

    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }

    pub fn recipe(&self, index: u64) -> DegradationRecipe {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
        DegradationRecipe {
            blur_sigma: rng.random_range(0.0..=self.cfg.max_blur),
            downscale_factor: self.cfg.factor,
            noise_sigma: rng.random_range(0.0..=self.cfg.max_noise),
            block_artifact_strength: rng.random_range(0.0..=self.cfg.max_block),
            seed: rng.random(),
        }
    }

    pub fn pair(&self, index: u64) -> Result<(VideoTensor, VideoTensor)> {
        let scene = SceneSpec {
            n_frames: self.cfg.n_frames,
            height: self.cfg.hr_size,
            width: self.cfg.hr_size,
            motion: self.cfg.motion,
            seed: self.cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(index),
        };
        let gt = generate_synthetic_video(&scene)?;
        let lr = degrade(&gt, &self.recipe(index))?;
        Ok((lr, gt))
    }
}

impl Iterator for PairSource {
    type Item = Result<(VideoTensor, VideoTensor)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.limit.is_some_and(|l| self.next >= l) {
            return None;
        }
        let item = self.pair(self.next);
        self.next += 1;
        Some(item)
    }
}
