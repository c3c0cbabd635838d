#![allow(dead_code)]

pub mod oracles;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use onestep_vsr::nets::{Generator, GeneratorConfig};
use onestep_vsr::nn::ops::randn;
use onestep_vsr::nn::{Module, ParamKind};
use onestep_vsr::videodata::pairs::{PairConfig, PairSource};
use onestep_vsr::videodata::VideoTensor;

/// Overwrites every parameter of the given kinds with `N(0, std^2)` draws.
pub fn perturb(m: &mut impl Module, kinds: &[ParamKind], std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut(&mut |p| {
        if kinds.contains(&p.kind()) {
            let v = randn(&mut rng, p.var().dims(), p.var().dtype(), &Device::Cpu).unwrap();
            p.set(&v.affine(std, 0.0).unwrap()).unwrap();
        }
    });
}

/// A generator whose adapters and RTS blocks are active (non-zero).
pub fn active_generator(seed: u64, cfg: GeneratorConfig) -> Generator {
    let mut g = Generator::new(seed, cfg).unwrap();
    perturb(&mut g, &[ParamKind::Lora, ParamKind::Rts], 0.1, seed + 1);
    g
}

pub fn lr_clip(frames: usize, side: usize, seed: u64) -> VideoTensor {
    let src = PairSource::new(PairConfig { n_frames: frames, hr_size: side * 4, seed, ..PairConfig::default() });
    src.pair(0).unwrap().0
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn(&mut rng, shape, DType::F32, &Device::Cpu).unwrap()
}

/// A generator config small enough for finite differences and short training runs.
pub fn micro_config() -> GeneratorConfig {
    use onestep_vsr::nets::{UnetConfig, VaeConfig};
    use onestep_vsr::rts::RtsConfig;
    let rts = Some(RtsConfig { channel_ratio: 2, inner_channels: None, attn_dim: 4 });
    GeneratorConfig {
        vae: VaeConfig { width: 8, lora_rank: Some(2), rts, ..VaeConfig::default() },
        unet: UnetConfig { channels: [8, 8, 8], temb_dim: 16, lora_rank: Some(2), rts, ..UnetConfig::default() },
        ..GeneratorConfig::default()
    }
}

/// Micro generator in `dtype` with active adapters and RTS blocks.
pub fn micro_generator(seed: u64, dtype: DType) -> Generator {
    let mut g = Generator::with_dtype(seed, micro_config(), dtype).unwrap();
    perturb(&mut g, &[ParamKind::Lora, ParamKind::Rts], 0.1, seed + 1);
    g.freeze_base();
    g
}

pub fn micro_source(seed: u64) -> PairSource {
    PairSource::new(PairConfig { n_frames: 3, hr_size: 32, seed, ..PairConfig::default() })
}

/// A random RTS block with every parameter non-zero and a matching F64 input.
pub fn random_rts_case(seed: u64) -> (onestep_vsr::rts::RtsBlock, Tensor, String) {
    use onestep_vsr::nn::Init;
    use onestep_vsr::rts::{RtsBlock, RtsConfig};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=5);
    let c = rng.random_range(2..=8);
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let cfg = RtsConfig {
        channel_ratio: rng.random_range(1..=3),
        inner_channels: rng.random_bool(0.3).then(|| 3 * rng.random_range(1..=3)),
        attn_dim: rng.random_range(1..=6),
    };
    let mut block = RtsBlock::new(&Init::new(seed, DType::F64), c, &cfg).unwrap();
    perturb(&mut block, &[ParamKind::Rts], 0.5, seed ^ 0xabc);
    let x = randn(&mut rng, &[t, c, h, w], DType::F64, &Device::Cpu).unwrap();
    (block, x, format!("t={t} c={c} h={h} w={w} {cfg:?}"))
}
