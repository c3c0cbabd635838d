//! Alternating training loop and its resumable state.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aux::{aux_losses, FeatureNet, FrameDiscriminator};
use super::{latent_of, make_tru, sjd_directions, sjd_surrogate, tru_denoise_loss, SjdConfig, SjdDraw, TruRole};
use crate::nets::{Checkpoint, Generator, Unet};
use crate::nn::ops::scalar;
use crate::nn::{Fwd, Module};
use crate::optim::Adam;
use crate::videodata::pairs::PairSource;
use crate::videodata::VideoTensor;
use crate::{Error, Result};

pub const LOG_HEADER: &str = "step,loss_total,loss_mse,loss_sjd_real,loss_sjd_cons,loss_tru_real,loss_tru_fake";

/// One logged step. `sjd_real` and `sjd_cons` are the mean absolute values of
/// the unnormalised realistic and consistency directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub sjd_real: f64,
    pub sjd_cons: f64,
    pub tru_real: f64,
    pub tru_fake: f64,
}

impl LossRow {
    pub fn to_line(&self) -> String {
        format!("{},{:?},{:?},{:?},{:?},{:?},{:?}", self.step, self.total, self.mse, self.sjd_real, self.sjd_cons, self.tru_real, self.tru_fake)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("malformed loss row `{line}`"));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(bad());
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        Ok(Self { step: parts[0].parse().map_err(|_| bad())?, total: f(1)?, mse: f(2)?, sjd_real: f(3)?, sjd_cons: f(4)?, tru_real: f(5)?, tru_fake: f(6)? })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub step: u64,
    pub opt_gen: Adam,
    pub opt_real: Adam,
    pub opt_fake: Adam,
    pub opt_disc: Adam,
    pub rng: ChaCha8Rng,
    /// Index of the next clip to draw from the data source.
    pub data_pos: u64,
    pub history: Vec<LossRow>,
}

impl TrainingState {
    pub fn new(cfg: &SjdConfig) -> Self {
        let adam = |lr| Adam::new(cfg.adam(lr));
        Self {
            step: 0,
            opt_gen: adam(cfg.gen_lr),
            opt_real: adam(cfg.tru_lr),
            opt_fake: adam(cfg.tru_lr),
            opt_disc: adam(cfg.aux.disc_lr),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            data_pos: 0,
            history: Vec::new(),
        }
    }
}

pub struct Trainer {
    pub g: Generator,
    pub real: Unet,
    pub fake: Unet,
    pub features: FeatureNet,
    pub disc: FrameDiscriminator,
    pub cfg: SjdConfig,
    pub state: TrainingState,
}

impl Trainer {
    /// Score networks start from the generator's base UNet.
    pub fn new(mut g: Generator, cfg: SjdConfig) -> Result<Self> {
        cfg.validate(&g.sched)?;
        g.freeze_base();
        Ok(Self {
            real: make_tru(&g, TruRole::Real, cfg.tru_rts)?,
            fake: make_tru(&g, TruRole::Fake, cfg.tru_rts)?,
            features: FeatureNet::new(cfg.aux.feature_seed, g.dtype())?,
            disc: FrameDiscriminator::new(cfg.seed ^ 0xd15c, g.dtype())?,
            state: TrainingState::new(&cfg),
            g,
            cfg,
        })
    }

    fn real_frozen(&self) -> bool {
        self.cfg.real_freeze_after.is_some_and(|n| self.state.step >= n)
    }

    /// One generator update, `update_ratio` fake-network updates, one
    /// real-network update, and one discriminator update when enabled.
    pub fn step(&mut self, v_lr: &VideoTensor, v_gt: &VideoTensor) -> Result<LossRow> {
        let dev = self.g.device();
        let dtype = self.g.dtype();
        let gt_unit = v_gt.to_tensor(&dev, dtype)?;
        let gt_signed = gt_unit.affine(2.0, -1.0)?;
        let real_frozen = self.real_frozen();
        let rng = &mut self.state.rng;

        let y = self.g.forward_tensor(v_lr, &Fwd::default())?;
        let y_unit = y.affine(0.5, 0.5)?;
        let disc = self.cfg.aux.gan.then_some(&self.disc);
        let aux = aux_losses(&y_unit, &gt_unit, &self.cfg.aux, Some(&self.features), disc)?;
        // With zero weight the score networks play no part and are left untouched.
        let sjd_on = self.cfg.weight != 0.0;
        let (total, mags) = if sjd_on {
            let z0 = latent_of(&self.g.vae, &y)?;
            let draw = SjdDraw::sample(&self.cfg, z0.dims(), &z0, rng)?;
            let dirs = sjd_directions(&self.real, &self.fake, &self.g.sched, &z0, &draw, &self.cfg)?;
            let terms = sjd_surrogate(&z0, dirs, self.cfg.lambda)?;
            let mags = (terms.dirs.realistic_mag, terms.dirs.consistency_mag);
            ((terms.total.affine(self.cfg.weight, 0.0)? + &aux.total)?, mags)
        } else {
            (aux.total.clone(), (0.0, 0.0))
        };
        let grads = total.backward()?;
        self.state.opt_gen.step(&self.g.trainable_params(), &grads)?;
        drop(grads);

        let (mut tru_fake, mut tru_real) = (0.0, 0.0);
        if sjd_on {
            let z_fake = latent_of(&self.g.vae, &y.detach())?.detach();
            for _ in 0..self.cfg.update_ratio {
                let loss = tru_denoise_loss(&self.fake, &self.g.sched, &z_fake, &self.cfg, rng)?;
                let grads = loss.backward()?;
                self.state.opt_fake.step(&self.fake.trainable_params(), &grads)?;
                tru_fake = scalar(&loss)?;
            }

            let z_real = latent_of(&self.g.vae, &gt_signed)?.detach();
            let loss = tru_denoise_loss(&self.real, &self.g.sched, &z_real, &self.cfg, rng)?;
            tru_real = scalar(&loss)?;
            if !real_frozen {
                let grads = loss.backward()?;
                self.state.opt_real.step(&self.real.trainable_params(), &grads)?;
            }
        }

        if self.cfg.aux.gan && v_gt.frames() >= 2 {
            let loss = self.disc.loss(&gt_unit, &y_unit.detach())?;
            let grads = loss.backward()?;
            self.state.opt_disc.step(&self.disc.trainable_params(), &grads)?;
        }

        let row = LossRow { step: self.state.step, total: scalar(&total)?, mse: scalar(&aux.mse)?, sjd_real: mags.0, sjd_cons: mags.1, tru_real, tru_fake };
        self.state.step += 1;
        self.state.history.push(row);
        Ok(row)
    }

    /// Runs up to `n_steps` steps from the stored data position; stops early
    /// when the source is exhausted. Each step appends one line to `log`.
    pub fn run(&mut self, source: &mut PairSource, n_steps: u64, mut log: Option<&mut dyn Write>) -> Result<()> {
        source.seek(self.state.data_pos);
        for _ in 0..n_steps {
            let Some(pair) = source.next() else { break };
            let (lr, gt) = pair?;
            let row = self.step(&lr, &gt)?;
            self.state.data_pos = source.cursor();
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.to_line()).map_err(|e| Error::io("training log", e))?;
            }
        }
        Ok(())
    }

    pub fn is_real_frozen(&self) -> bool {
        self.real_frozen()
    }

    /// Everything needed to resume: generator, score networks, discriminator,
    /// optimiser moments, random stream, data position, and loss history.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.g.to_checkpoint();
        ck.push_module(&self.real);
        ck.push_module(&self.fake);
        ck.push_module(&self.disc);
        let s = &self.state;
        for (tag, opt) in [("gen", &s.opt_gen), ("real", &s.opt_real), ("fake", &s.opt_fake), ("disc", &s.opt_disc)] {
            ck.set_meta(&format!("train.opt_{tag}_steps"), opt.steps());
            for (name, t) in opt.records() {
                ck.push(format!("opt.{tag}.{name}"), &t);
            }
        }
        ck.set_meta("train.step", s.step);
        ck.set_meta("train.data_pos", s.data_pos);
        let seed: String = s.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ck.set_meta("train.rng_seed", seed);
        ck.set_meta("train.rng_stream", s.rng.get_stream());
        ck.set_meta("train.rng_word_pos", s.rng.get_word_pos());
        ck.set_meta("train.tru_rts", self.cfg.tru_rts);
        let hist: Vec<String> = s.history.iter().map(LossRow::to_line).collect();
        ck.set_meta("train.history", hist.join(";"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: SjdConfig) -> Result<Self> {
        let g = Generator::from_checkpoint(ck)?;
        let tru_rts: bool = ck.meta_parse("train.tru_rts")?;
        if tru_rts != cfg.tru_rts {
            return Err(Error::checkpoint("train.tru_rts", "does not match the supplied configuration"));
        }
        let mut tr = Self::new(g, cfg.clone())?;
        ck.load_module(&mut tr.real)?;
        ck.load_module(&mut tr.fake)?;
        ck.load_module(&mut tr.disc)?;
        let opt = |tag: &str, lr: f64| -> Result<Adam> {
            let prefix = format!("opt.{tag}.");
            let steps = ck.meta_parse(&format!("train.opt_{tag}_steps"))?;
            Adam::from_records(cfg.adam(lr), steps, ck.with_prefix(&prefix))
        };
        let seed_hex = ck.meta("train.rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(Error::checkpoint("train.rng_seed", "expected 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|e| Error::checkpoint("train.rng_seed", e))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ck.meta_parse("train.rng_stream")?);
        rng.set_word_pos(ck.meta_parse("train.rng_word_pos")?);
        let history = match ck.meta("train.history")? {
            "" => Vec::new(),
            h => h.split(';').map(LossRow::parse).collect::<Result<_>>()?,
        };
        tr.state = TrainingState {
            step: ck.meta_parse("train.step")?,
            opt_gen: opt("gen", tr.cfg.gen_lr)?,
            opt_real: opt("real", tr.cfg.tru_lr)?,
            opt_fake: opt("fake", tr.cfg.tru_lr)?,
            opt_disc: opt("disc", tr.cfg.aux.disc_lr)?,
            rng,
            data_pos: ck.meta_parse("train.data_pos")?,
            history,
        };
        Ok(tr)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>, cfg: SjdConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, cfg)
    }

    /// Mean of the logged MSE over `steps`.
    pub fn mean_mse(&self, steps: std::ops::Range<usize>) -> f64 {
        let rows = &self.state.history[steps.start.min(self.state.history.len())..steps.end.min(self.state.history.len())];
        rows.iter().map(|r| r.mse).sum::<f64>() / rows.len().max(1) as f64
    }
}

/// Builds a trainer around `g` and runs `n_steps` steps on `source`.
pub fn train(g: Generator, source: &mut PairSource, cfg: SjdConfig, n_steps: u64) -> Result<Trainer> {
    let mut tr = Trainer::new(g, cfg)?;
    tr.run(source, n_steps, None)?;
    Ok(tr)
}
