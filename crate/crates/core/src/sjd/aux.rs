//! Pixel-space auxiliary objectives: MSE, a feature-matching loss through a
//! frozen random network, and a hinge loss against a frame-pair discriminator.

use candle_core::{Tensor, D};

use crate::nn::ops::mse;
use crate::nn::{Conv2d, ConvSpec, Fwd, Init, Linear, Module, Param, ParamKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AuxConfig {
    pub mse_weight: f64,
    pub perceptual: bool,
    pub perceptual_weight: f64,
    pub gan: bool,
    pub gan_weight: f64,
    pub disc_lr: f64,
    /// Seed of the frozen feature network.
    pub feature_seed: u64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { mse_weight: 1.0, perceptual: true, perceptual_weight: 0.1, gan: true, gan_weight: 0.05, disc_lr: 1e-4, feature_seed: 7 }
    }
}

/// Two strided convolutions with SiLU, never trained.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl FeatureNet {
    pub fn new(seed: u64, dtype: candle_core::DType) -> Result<Self> {
        let init = Init::new(seed, dtype).sub("features");
        let mut net = Self {
            c1: Conv2d::new(&init.sub("c1"), ConvSpec::new(3, 16, 3, ParamKind::Aux).stride(2))?,
            c2: Conv2d::new(&init.sub("c2"), ConvSpec::new(16, 32, 3, ParamKind::Aux).stride(2))?,
        };
        net.set_trainable_by(&|_| false);
        Ok(net)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let fwd = Fwd::base();
        let h = self.c1.forward(x, &fwd)?.silu()?;
        Ok(self.c2.forward(&h, &fwd)?.silu()?)
    }
}

impl Module for FeatureNet {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.c1.visit(f);
        self.c2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
    }
}

/// Scores consecutive frame pairs `[x_i, x_{i+1}]` stacked on channels.
#[derive(Debug, Clone)]
pub struct FrameDiscriminator {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub head: Linear,
}

impl FrameDiscriminator {
    pub fn new(seed: u64, dtype: candle_core::DType) -> Result<Self> {
        let init = Init::new(seed, dtype).sub("disc");
        Ok(Self {
            c1: Conv2d::new(&init.sub("c1"), ConvSpec::new(6, 16, 3, ParamKind::Aux).stride(2))?,
            c2: Conv2d::new(&init.sub("c2"), ConvSpec::new(16, 32, 3, ParamKind::Aux).stride(2))?,
            head: Linear::new(&init.sub("head"), 32, 1, 1.0, ParamKind::Aux)?,
        })
    }

    /// One logit per frame pair, `[T-1, 1]`. Needs at least two frames.
    pub fn forward(&self, video: &Tensor) -> Result<Tensor> {
        let n = video.dim(0)?;
        if n < 2 {
            return Err(Error::Parameter("discriminator needs at least two frames".into()));
        }
        let pairs = Tensor::cat(&[video.narrow(0, 0, n - 1)?, video.narrow(0, 1, n - 1)?], 1)?;
        let fwd = Fwd::base();
        let h = self.c1.forward(&pairs, &fwd)?.silu()?;
        let h = self.c2.forward(&h, &fwd)?.silu()?;
        self.head.forward(&h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Hinge loss for the discriminator on detached inputs.
    pub fn loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let r = (1.0 - self.forward(&real.detach())?)?.relu()?.mean_all()?;
        let f = (self.forward(&fake.detach())? + 1.0)?.relu()?.mean_all()?;
        Ok((r + f)?)
    }
}

impl Module for FrameDiscriminator {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.c1.visit(f);
        self.c2.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct AuxTerms {
    pub mse: Tensor,
    pub perceptual: Option<Tensor>,
    pub gan: Option<Tensor>,
    pub total: Tensor,
}

/// Weighted auxiliary loss on unit-range frames. The adversarial term is the
/// generator side of the hinge objective, `-mean D(v_hr)`, and is skipped for
/// single-frame clips.
pub fn aux_losses(v_hr: &Tensor, v_gt: &Tensor, cfg: &AuxConfig, features: Option<&FeatureNet>, disc: Option<&FrameDiscriminator>) -> Result<AuxTerms> {
    if v_hr.dims() != v_gt.dims() {
        return Err(Error::Dimension(format!("output {:?} vs ground truth {:?}", v_hr.dims(), v_gt.dims())));
    }
    let m = mse(v_hr, v_gt)?;
    let mut total = m.affine(cfg.mse_weight, 0.0)?;
    let perceptual = match (cfg.perceptual, features) {
        (true, Some(fnet)) => {
            let p = mse(&fnet.forward(v_hr)?, &fnet.forward(&v_gt.detach())?)?;
            total = (total + p.affine(cfg.perceptual_weight, 0.0)?)?;
            Some(p)
        }
        _ => None,
    };
    let gan = match (cfg.gan, disc) {
        (true, Some(d)) if v_hr.dim(0)? >= 2 => {
            let g = d.forward(v_hr)?.mean_all()?.neg()?;
            total = (total + g.affine(cfg.gan_weight, 0.0)?)?;
            Some(g)
        }
        _ => None,
    };
    Ok(AuxTerms { mse: m, perceptual, gan, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::scalar;
    use candle_core::DType;

    fn video(seed: u64) -> Tensor {
        Init::new(seed, DType::F32).normal("v", &[3, 3, 16, 16], 0.3, ParamKind::Aux).unwrap().tensor().affine(1.0, 0.5).unwrap()
    }

    #[test]
    fn identical_inputs_have_zero_mse_and_feature_loss() {
        let v = video(1);
        let cfg = AuxConfig { gan: false, ..AuxConfig::default() };
        for seed in [1, 2, 3] {
            let fnet = FeatureNet::new(seed, DType::F32).unwrap();
            let t = aux_losses(&v, &v, &cfg, Some(&fnet), None).unwrap();
            assert_eq!(scalar(&t.mse).unwrap(), 0.0);
            assert_eq!(scalar(t.perceptual.as_ref().unwrap()).unwrap(), 0.0);
            assert_eq!(scalar(&t.total).unwrap(), 0.0);
        }
    }

    #[test]
    fn mse_only_configuration_is_plain_mse() {
        let (a, b) = (video(1), video(2));
        let cfg = AuxConfig { perceptual: false, gan: false, ..AuxConfig::default() };
        let fnet = FeatureNet::new(1, DType::F32).unwrap();
        let disc = FrameDiscriminator::new(1, DType::F32).unwrap();
        let t = aux_losses(&a, &b, &cfg, Some(&fnet), Some(&disc)).unwrap();
        let want = scalar(&(&a - &b).unwrap().sqr().unwrap().mean_all().unwrap()).unwrap();
        assert_eq!(scalar(&t.total).unwrap(), want);
        assert!(t.perceptual.is_none() && t.gan.is_none());
    }

    #[test]
    fn mismatched_shapes_and_discriminator_shapes() {
        let a = video(1);
        let b = a.narrow(0, 0, 2).unwrap();
        assert!(matches!(aux_losses(&a, &b, &AuxConfig::default(), None, None), Err(Error::Dimension(_))));
        let disc = FrameDiscriminator::new(1, DType::F32).unwrap();
        assert_eq!(disc.forward(&a).unwrap().dims(), &[2, 1]);
        assert!(scalar(&disc.loss(&a, &video(3)).unwrap()).unwrap() >= 0.0);
        assert!(disc.forward(&b.narrow(0, 0, 1).unwrap()).is_err());
    }
}
