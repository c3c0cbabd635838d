mod common;

use candle_core::DType;
use common::{active_generator, lr_clip, perturb, rand_tensor};
use onestep_vsr::nets::{Checkpoint, Generator, GeneratorConfig};
use onestep_vsr::nn::ops::{max_abs_diff, mse, to_vec_f64};
use onestep_vsr::nn::{Fwd, Module, ParamKind};
use onestep_vsr::optim::{Adam, AdamConfig};
use onestep_vsr::probe::Probe;
use onestep_vsr::rts::RtsConfig;
use onestep_vsr::schedule::DegradationFactor;
use onestep_vsr::Error;

#[test]
fn generator_upscales_by_four_with_one_unet_call() {
    let g = Generator::new(3, GeneratorConfig::default()).unwrap();
    let lr = lr_clip(6, 16, 1);
    let probe = Probe::new();
    let y = g.forward_tensor(&lr, &Fwd::with_probe(&probe)).unwrap();
    assert_eq!(y.dims(), &[6, 3, 64, 64]);
    assert_eq!(probe.unet_calls(), 1);
    assert_eq!(g.generate(&lr).unwrap().dims(), (6, 3, 64, 64));
}

#[test]
fn indivisible_input_is_a_dimension_error() {
    let g = Generator::new(3, GeneratorConfig::default()).unwrap();
    let lr = lr_clip(2, 10, 1);
    assert!(matches!(g.forward_tensor(&lr, &Fwd::default()), Err(Error::Dimension(_))));
}

#[test]
fn fresh_adapters_and_rts_are_a_no_op() {
    let full = Generator::new(5, GeneratorConfig::default()).unwrap();
    let bare = Generator::new(5, GeneratorConfig::default().with_rts(None).with_lora(None)).unwrap();
    let lr = lr_clip(4, 8, 2);
    let a = full.forward_tensor(&lr, &Fwd::default()).unwrap();
    let b = bare.forward_tensor(&lr, &Fwd::default()).unwrap();
    assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
}

#[test]
fn unit_factor_returns_the_autoencoded_input() {
    let g = Generator::new(7, GeneratorConfig::default()).unwrap();
    let lr = lr_clip(3, 8, 3);
    let prep = g.prepare_with_d(&lr, DegradationFactor::new(1.0).unwrap()).unwrap();
    assert_eq!(prep.t, 1);
    let y = g.forward_prepared(&prep, &Fwd::default()).unwrap();
    let fwd = Fwd::default();
    let expect = g.vae.decode(&g.vae.encode_frames(&prep.x_up, &fwd).unwrap(), &fwd).unwrap();
    assert_eq!(max_abs_diff(&y, &expect).unwrap(), 0.0);
}

#[test]
fn frozen_base_survives_training_steps() {
    let mut g = active_generator(11, GeneratorConfig::default());
    g.freeze_base();
    let before: Vec<(String, Vec<f64>, ParamKind)> =
        g.params().iter().map(|p| (p.name().to_string(), to_vec_f64(p.var().as_tensor()).unwrap(), p.kind())).collect();
    let lr = lr_clip(3, 8, 4);
    let target = rand_tensor(&[3, 3, 32, 32], 9);
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    for _ in 0..3 {
        let y = g.forward_tensor(&lr, &Fwd::default()).unwrap();
        let grads = mse(&y, &target).unwrap().backward().unwrap();
        // every parameter is offered; frozen ones must be skipped
        opt.step(&g.params(), &grads).unwrap();
    }
    let mut changed = 0;
    for (p, (name, old, kind)) in g.params().iter().zip(&before) {
        let now = to_vec_f64(p.var().as_tensor()).unwrap();
        if *kind == ParamKind::Base {
            assert_eq!(&now, old, "{name} moved");
        } else if &now != old {
            changed += 1;
        }
    }
    assert!(changed > 0);
    assert!(g.trainable_params().iter().all(|p| p.kind() != ParamKind::Base));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut g = active_generator(13, GeneratorConfig::default());
    g.vae.latent_scale = 1.7;
    g.freeze_base();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    g.save(&path).unwrap();
    let back = Generator::load(&path).unwrap();
    assert_eq!(back.cfg, g.cfg);
    assert_eq!(back.vae.latent_scale, 1.7);
    for (a, b) in g.params().iter().zip(back.params()) {
        assert_eq!(a.name(), b.name());
        assert_eq!(a.trainable(), b.trainable());
        assert_eq!(max_abs_diff(a.var().as_tensor(), b.var().as_tensor()).unwrap(), 0.0, "{}", a.name());
    }
    let lr = lr_clip(2, 8, 5);
    let ya = g.forward_tensor(&lr, &Fwd::default()).unwrap();
    let yb = back.forward_tensor(&lr, &Fwd::default()).unwrap();
    assert_eq!(max_abs_diff(&ya, &yb).unwrap(), 0.0);
}

#[test]
fn checkpoint_header_and_errors() {
    let g = Generator::new(1, GeneratorConfig::default()).unwrap();
    let ck = g.to_checkpoint();
    assert_eq!(ck.meta("upscale").unwrap(), "4");
    assert_eq!(ck.meta("s").unwrap(), "4");
    assert_eq!(ck.meta("c_lat").unwrap(), "4");
    assert_eq!(ck.meta("schedule_kind").unwrap(), "linear_beta");
    assert_eq!(ck.meta("lora_rank").unwrap(), "8");
    assert!(ck.meta("rts_placement").unwrap().contains("unet:"));

    let bytes = ck.to_bytes().unwrap();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");

    let mut wrong = ck.clone();
    let (name, t) = wrong.records[0].clone();
    wrong.records[0] = (name.clone(), t.flatten_all().unwrap());
    match Generator::from_checkpoint(&wrong) {
        Err(Error::Checkpoint { field, .. }) => assert_eq!(field, name),
        other => panic!("expected checkpoint error, got {other:?}"),
    }
    let mut missing = ck.clone();
    missing.meta.remove("c_lat");
    match Generator::from_checkpoint(&missing) {
        Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "c_lat"),
        other => panic!("expected checkpoint error, got {other:?}"),
    }
}

/// Indices of output frames that change when input frame `k` is perturbed.
fn reach(g: &Generator, frames: usize, k: usize) -> Vec<usize> {
    let lr = lr_clip(frames, 8, 21);
    let d = DegradationFactor::new(0.6).unwrap();
    let base = g.forward_prepared(&g.prepare_with_d(&lr, d).unwrap(), &Fwd::default()).unwrap();
    let mut data = lr.data().clone();
    data.index_axis_mut(ndarray::Axis(0), k).mapv_inplace(|v| 1.0 - v);
    let lr2 = onestep_vsr::videodata::VideoTensor::new(data).unwrap();
    let out = g.forward_prepared(&g.prepare_with_d(&lr2, d).unwrap(), &Fwd::default()).unwrap();
    (0..frames).filter(|&i| max_abs_diff(&base.narrow(0, i, 1).unwrap(), &out.narrow(0, i, 1).unwrap()).unwrap() > 0.0).collect()
}

#[test]
fn receptive_field_grows_with_rts_blocks() {
    let rts = Some(RtsConfig::default());
    let n: usize = 24;
    let k: usize = 12;
    let mut unet_only = GeneratorConfig::default().with_rts(None);
    unet_only.unet.rts = rts;
    let mut vae_only = GeneratorConfig::default().with_rts(None);
    vae_only.vae.rts = rts;
    // each block holds two units, each reaching one neighbour on either side
    for (cfg, blocks) in [(GeneratorConfig::default().with_rts(None), 0usize), (vae_only, 2), (unet_only, 5), (GeneratorConfig::default(), 7)] {
        let g = active_generator(31, cfg);
        let r = 2 * blocks;
        let expect: Vec<usize> = (k.saturating_sub(r)..=(k + r).min(n - 1)).collect();
        assert_eq!(reach(&g, n, k), expect, "{blocks} blocks");
    }
}

#[test]
fn unet_output_depends_on_timestep_after_perturbation() {
    let mut g = Generator::new(2, GeneratorConfig::default()).unwrap();
    perturb(&mut g.unet, &[ParamKind::Base], 0.2, 4);
    let z = rand_tensor(&[2, 4, 8, 8], 3);
    let a = g.unet.forward(&z, 10, &Fwd::default()).unwrap();
    let b = g.unet.forward(&z, 900, &Fwd::default()).unwrap();
    assert!(max_abs_diff(&a, &b).unwrap() > 1e-4);
    assert_eq!(a.dtype(), DType::F32);
}
