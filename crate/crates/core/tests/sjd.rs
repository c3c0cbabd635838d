mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::{micro_generator, micro_source, perturb, rand_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use onestep_vsr::nets::Generator;
use onestep_vsr::nn::ops::{randn, scalar, to_vec_f64};
use onestep_vsr::nn::{Fwd, Module, ParamKind};
use onestep_vsr::schedule::diffuse;
use onestep_vsr::sjd::*;

fn pair(seed: u64, frames: usize) -> (onestep_vsr::videodata::VideoTensor, onestep_vsr::videodata::VideoTensor) {
    let mut src = micro_source(seed);
    src.cfg.n_frames = frames;
    src.pair(0).unwrap()
}

fn trus(g: &Generator, differ: bool) -> (onestep_vsr::nets::Unet, onestep_vsr::nets::Unet) {
    let real = make_tru(g, TruRole::Real, true).unwrap();
    let mut fake = make_tru(g, TruRole::Fake, true).unwrap();
    if differ {
        perturb(&mut fake, &[ParamKind::Rts], 0.1, 99);
    }
    (real, fake)
}

fn grads_of(g: &Generator, gs: &candle_core::backprop::GradStore) -> Vec<Vec<f64>> {
    g.trainable_params().iter().map(|p| gs.get(p.var().as_tensor()).map(|t| to_vec_f64(t).unwrap()).unwrap_or_else(|| vec![0.0; p.elem_count()])).collect()
}

#[test]
fn identical_score_networks_give_exactly_zero_gradient() {
    let g = micro_generator(1, DType::F32);
    let (real, fake) = trus(&g, false);
    let (lr, _) = pair(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gs = sjd_generator_gradient(&g, &real, &fake, &lr, &SjdConfig::default(), &mut rng).unwrap();
    let all = grads_of(&g, &gs);
    assert!(!all.is_empty());
    assert!(all.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn single_frame_reduces_to_the_realistic_term() {
    let g = micro_generator(4, DType::F32);
    let (real, fake) = trus(&g, true);
    let (lr, _) = pair(5, 1);
    let cfg = SjdConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (_, terms, _) = sjd_terms(&g, &real, &fake, &lr, &cfg, &mut rng).unwrap();
    assert!(terms.dirs.consistency.is_none());
    assert_eq!(scalar(&terms.consistency).unwrap(), 0.0);
    assert_eq!(scalar(&terms.total).unwrap(), scalar(&terms.realistic).unwrap());

    let with = grads_of(&g, &terms.total.backward().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg0 = SjdConfig { lambda: 0.0, ..cfg };
    let (_, t0, _) = sjd_terms(&g, &real, &fake, &lr, &cfg0, &mut rng).unwrap();
    let without = grads_of(&g, &t0.realistic.backward().unwrap());
    assert_eq!(with, without);
    assert!(with.iter().flatten().any(|v| *v != 0.0));
}

#[test]
fn surrogate_gradient_in_latent_matches_loop_oracle() {
    let (t, c, h, w) = (4, 2, 3, 3);
    let z0 = Var::from_tensor(&rand_tensor(&[t, c, h, w], 1).to_dtype(DType::F64).unwrap()).unwrap();
    let r = rand_tensor(&[t, c, h, w], 2).to_dtype(DType::F64).unwrap();
    let k = rand_tensor(&[t - 1, c, h, w], 3).to_dtype(DType::F64).unwrap();
    let lambda = 0.7;
    let dirs = SjdDirections { realistic: r.clone(), consistency: Some(k.clone()), realistic_mag: 0.0, consistency_mag: 0.0 };
    let terms = sjd_surrogate(z0.as_tensor(), dirs, lambda).unwrap();
    let got = to_vec_f64(terms.total.backward().unwrap().get(z0.as_tensor()).unwrap()).unwrap();
    let (rv, kv) = (to_vec_f64(&r).unwrap(), to_vec_f64(&k).unwrap());
    let n = (t * c * h * w) as f64;
    let per = c * h * w;
    for f in 0..t {
        for e in 0..per {
            // z0[f] enters pair f with + and pair f-1 with -
            let mut want = rv[f * per + e];
            if f + 1 < t {
                want += lambda * kv[f * per + e];
            }
            if f > 0 {
                want -= lambda * kv[(f - 1) * per + e];
            }
            want /= n;
            assert!((got[f * per + e] - want).abs() < 1e-14, "frame {f} elem {e}");
        }
    }
}

#[test]
fn directions_match_explicit_computation() {
    let g = micro_generator(7, DType::F64);
    let (real, fake) = trus(&g, true);
    let z0 = rand_tensor(&[3, 4, 4, 4], 8).to_dtype(DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = SjdConfig { consistency_space: ConsistencySpace::Eps, ..SjdConfig::default() };
    let draw = SjdDraw::sample(&cfg, z0.dims(), &z0, &mut rng).unwrap();
    let dirs = sjd_directions(&real, &fake, &g.sched, &z0, &draw, &cfg).unwrap();

    let zt = diffuse(&z0, &draw.eps, draw.t, &g.sched).unwrap();
    let er = to_vec_f64(&real.forward(&zt, draw.t, &Fwd::default()).unwrap()).unwrap();
    let ef = to_vec_f64(&fake.forward(&zt, draw.t, &Fwd::default()).unwrap()).unwrap();
    let dir: Vec<f64> = er.iter().zip(&ef).map(|(a, b)| a - b).collect();
    let mean_abs = dir.iter().map(|v| v.abs()).sum::<f64>() / dir.len() as f64;
    let w = 1.0 / (mean_abs + OMEGA_EPS);
    for (got, d) in to_vec_f64(&dirs.realistic).unwrap().iter().zip(&dir) {
        assert!((got - w * d).abs() <= 1e-12 * (1.0 + (w * d).abs()));
    }
    let per = 4 * 4 * 4;
    let cons: Vec<f64> = (0..2 * per).map(|i| dir[i] - dir[i + per]).collect();
    let cm = cons.iter().map(|v| v.abs()).sum::<f64>() / cons.len() as f64;
    let wc = 1.0 / (cm + OMEGA_EPS);
    for (got, c) in to_vec_f64(dirs.consistency.as_ref().unwrap()).unwrap().iter().zip(&cons) {
        assert!((got - wc * c).abs() <= 1e-10 * (1.0 + (wc * c).abs()));
    }
    assert!((dirs.realistic_mag - mean_abs).abs() < 1e-12);

    // the clean-latent space differs by a positive scale, which the weighting removes
    let x0 = sjd_directions(&real, &fake, &g.sched, &z0, &draw, &SjdConfig::default()).unwrap();
    let (a, b) = (to_vec_f64(x0.consistency.as_ref().unwrap()).unwrap(), to_vec_f64(dirs.consistency.as_ref().unwrap()).unwrap());
    // relative effect of the epsilon in the two weights
    let tol = 4.0 * OMEGA_EPS / dirs.consistency_mag.min(x0.consistency_mag) + 1e-9;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let g = micro_generator(11, DType::F64);
    let (real, fake) = trus(&g, true);
    let (lr, _) = pair(12, 3);
    let cfg = SjdConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (_, terms, _) = sjd_terms(&g, &real, &fake, &lr, &cfg, &mut rng).unwrap();
    let dirs = terms.dirs.clone();
    let grads = terms.total.backward().unwrap();
    let objective = |g: &Generator| -> f64 {
        let y = g.forward_tensor(&lr, &Fwd::default()).unwrap();
        let z0 = latent_of(&g.vae, &y).unwrap();
        scalar(&sjd_surrogate(&z0, dirs.clone(), cfg.lambda).unwrap().total).unwrap()
    };
    assert_eq!(objective(&g), scalar(&terms.total).unwrap());
    let h = 1e-5;
    let mut checked = 0;
    for p in g.trainable_params().iter().step_by(5) {
        let Some(gt) = grads.get(p.var().as_tensor()) else { continue };
        let analytic = to_vec_f64(gt).unwrap();
        let idx = analytic.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        if analytic[idx].abs() < 1e-9 {
            continue;
        }
        let orig = p.var().as_tensor().flatten_all().unwrap();
        let mut vals = to_vec_f64(&orig).unwrap();
        let shifted = |vals: &[f64]| Tensor::from_vec(vals.to_vec(), p.var().dims(), &Device::Cpu).unwrap();
        vals[idx] += h;
        p.set(&shifted(&vals)).unwrap();
        let up = objective(&g);
        vals[idx] -= 2.0 * h;
        p.set(&shifted(&vals)).unwrap();
        let down = objective(&g);
        vals[idx] += h;
        p.set(&shifted(&vals)).unwrap();
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - analytic[idx]).abs() / analytic[idx].abs();
        assert!(rel < 1e-3, "{}: fd {fd} vs analytic {} (rel {rel})", p.name(), analytic[idx]);
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} parameters checked");
}

#[test]
fn omega_weighting_properties() {
    let ones = Tensor::ones(&[2, 3], DType::F64, &Device::Cpu).unwrap();
    let w = omega(&ones, OmegaKind::MeanAbs { sigma_norm: 2.5 }).unwrap();
    assert!((w - 2.5 / (1.0 + OMEGA_EPS)).abs() < 1e-15);
    let x = rand_tensor(&[4, 5], 1).to_dtype(DType::F64).unwrap();
    let kind = OmegaKind::default();
    let (a, b) = (omega(&x, kind).unwrap(), omega(&x.affine(2.0, 0.0).unwrap(), kind).unwrap());
    assert!((a / b - 2.0).abs() < 1e-6);
    assert_eq!(omega(&x, OmegaKind::Unit).unwrap(), 1.0);
    let zero = Tensor::zeros(&[3], DType::F64, &Device::Cpu).unwrap();
    assert!(omega(&zero, kind).unwrap().is_finite());
}

#[test]
fn denoising_loss_oracle_and_stub() {
    let g = micro_generator(1, DType::F64);
    let cfg = SjdConfig::default();
    let z0 = rand_tensor(&[4, 4, 16, 16], 2).to_dtype(DType::F64).unwrap();
    let sched = &g.sched;
    let oracle = |zt: &Tensor, t: usize| -> onestep_vsr::Result<Tensor> {
        let s = sched.sqrt_alpha_bar(t);
        let q = sched.sqrt_one_minus_alpha_bar(t);
        Ok((zt - z0.affine(s, 0.0)?)?.affine(1.0 / q, 0.0)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(scalar(&denoise_loss_with(&oracle, sched, &z0, &cfg, &mut rng).unwrap()).unwrap() < 1e-20);
    let stub = |zt: &Tensor, _t: usize| -> onestep_vsr::Result<Tensor> { Ok(zt.zeros_like()?) };
    let l = scalar(&denoise_loss_with(&stub, sched, &z0, &cfg, &mut rng).unwrap()).unwrap();
    assert!((l - 1.0).abs() < 0.1, "{l}");
    let tru = make_tru(&g, TruRole::Real, true).unwrap();
    let small = z0.narrow(0, 0, 2).unwrap().narrow(2, 0, 8).unwrap().narrow(3, 0, 8).unwrap();
    assert!(scalar(&tru_denoise_loss(&tru, sched, &small, &cfg, &mut rng).unwrap()).unwrap() >= 0.0);
}

#[test]
fn score_networks_copy_the_base_unet_and_stay_separate() {
    let g = micro_generator(2, DType::F32);
    let (real, fake) = trus(&g, false);
    assert!(real.params().iter().all(|p| p.trainable()));
    assert!(real.params().iter().all(|p| p.kind() != ParamKind::Lora));
    let z = rand_tensor(&[2, 4, 4, 4], 1);
    let a = real.forward(&z, 500, &Fwd::default()).unwrap();
    let b = fake.forward(&z, 500, &Fwd::default()).unwrap();
    let base = micro_generator(2, DType::F32);
    let c = base.unet.forward(&z, 500, &Fwd::base()).unwrap();
    assert_eq!(to_vec_f64(&a).unwrap(), to_vec_f64(&b).unwrap());
    assert_eq!(to_vec_f64(&a).unwrap(), to_vec_f64(&c).unwrap());
    // updating one must not move the other
    real.params()[0].set(&real.params()[0].var().as_tensor().affine(2.0, 0.0).unwrap()).unwrap();
    assert_eq!(to_vec_f64(&fake.forward(&z, 500, &Fwd::default()).unwrap()).unwrap(), to_vec_f64(&b).unwrap());
}

#[test]
fn fake_update_does_not_reach_the_generator() {
    let g = micro_generator(3, DType::F32);
    let (_, fake) = trus(&g, true);
    let (lr, _) = pair(4, 3);
    let y = g.forward_tensor(&lr, &Fwd::default()).unwrap();
    let z = latent_of(&g.vae, &y.detach()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gs = tru_denoise_loss(&fake, &g.sched, &z, &SjdConfig::default(), &mut rng).unwrap().backward().unwrap();
    assert!(g.trainable_params().iter().all(|p| gs.get(p.var().as_tensor()).is_none()));
    assert!(fake.params().iter().any(|p| gs.get(p.var().as_tensor()).is_some()));
}

fn snapshot(m: &impl Module) -> Vec<(String, Vec<f64>)> {
    m.params().iter().map(|p| (p.name().to_string(), to_vec_f64(p.var().as_tensor()).unwrap())).collect()
}

#[test]
fn training_step_updates_what_it_should() {
    let g = micro_generator(6, DType::F32);
    let base_before: Vec<_> = snapshot(&g).into_iter().filter(|(n, _)| !n.contains("lora") && !n.contains("rts")).collect();
    let cfg = SjdConfig { real_freeze_after: Some(0), ..SjdConfig::default() };
    let mut tr = Trainer::new(g, cfg).unwrap();
    let (real0, fake0, gen0) = (snapshot(&tr.real), snapshot(&tr.fake), snapshot(&tr.g));
    let mut src = micro_source(7);
    tr.run(&mut src, 2, None).unwrap();
    let base_after: Vec<_> = snapshot(&tr.g).into_iter().filter(|(n, _)| !n.contains("lora") && !n.contains("rts")).collect();
    assert_eq!(base_before, base_after);
    assert_ne!(snapshot(&tr.g), gen0);
    assert_ne!(snapshot(&tr.fake), fake0);
    assert_eq!(snapshot(&tr.real), real0);
    assert!(tr.is_real_frozen());

    let mut tr = Trainer::new(micro_generator(6, DType::F32), SjdConfig::default()).unwrap();
    let real0 = snapshot(&tr.real);
    tr.run(&mut src, 1, None).unwrap();
    assert_ne!(snapshot(&tr.real), real0);
}

#[test]
fn zero_steps_leave_everything_unchanged() {
    let g = micro_generator(8, DType::F32);
    let before = snapshot(&g);
    let tr = train(g, &mut micro_source(1), SjdConfig::default(), 0).unwrap();
    assert_eq!(snapshot(&tr.g), before);
    assert_eq!(tr.state.step, 0);
    assert!(tr.state.history.is_empty());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = SjdConfig { seed: 5, ..SjdConfig::default() };
    let run = |n: u64| {
        let mut tr = Trainer::new(micro_generator(9, DType::F32), cfg.clone()).unwrap();
        let mut log = Vec::new();
        tr.run(&mut micro_source(2), n, Some(&mut log)).unwrap();
        (tr, log)
    };
    let (full, log_full) = run(4);
    let (again, log_again) = run(4);
    assert_eq!(full.to_checkpoint().to_bytes().unwrap(), again.to_checkpoint().to_bytes().unwrap());
    assert_eq!(log_full, log_again);

    let (half, mut log) = run(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    half.save(&path).unwrap();
    drop(half);
    let mut resumed = Trainer::load(&path, cfg.clone()).unwrap();
    resumed.run(&mut micro_source(2), 2, Some(&mut log)).unwrap();
    assert_eq!(resumed.to_checkpoint().to_bytes().unwrap(), full.to_checkpoint().to_bytes().unwrap());
    assert_eq!(log, log_full);
    assert_eq!(resumed.state.history, full.state.history);
    let rows: Vec<LossRow> = String::from_utf8(log).unwrap().lines().map(|l| LossRow::parse(l).unwrap()).collect();
    assert_eq!(rows, full.state.history);
}

#[test]
fn training_stops_when_data_runs_out() {
    let mut src = micro_source(3).with_limit(3);
    let tr = train(micro_generator(1, DType::F32), &mut src, SjdConfig::default(), 10).unwrap();
    assert_eq!(tr.state.step, 3);
    assert_eq!(tr.state.data_pos, 3);
}

#[test]
fn invalid_configs_are_rejected() {
    let g = micro_generator(1, DType::F32);
    for cfg in [
        SjdConfig { lambda: -1.0, ..SjdConfig::default() },
        SjdConfig { lambda: f64::NAN, ..SjdConfig::default() },
        SjdConfig { t_lo: 500, t_hi: 100, ..SjdConfig::default() },
        SjdConfig { t_lo: 0, ..SjdConfig::default() },
        SjdConfig { t_hi: 5000, ..SjdConfig::default() },
    ] {
        assert!(matches!(Trainer::new(g.deep_copy().unwrap(), cfg), Err(onestep_vsr::Error::Config(_))));
    }
}

#[test]
fn sampled_timesteps_stay_in_range() {
    let cfg = SjdConfig { t_lo: 100, t_hi: 110, ..SjdConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let like = randn(&mut rng, &[1], DType::F32, &Device::Cpu).unwrap();
    for _ in 0..200 {
        let d = SjdDraw::sample(&cfg, &[2, 2], &like, &mut rng).unwrap();
        assert!((100..=110).contains(&d.t));
    }
}
