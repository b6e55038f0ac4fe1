//! Training behaviour on small problems.

mod common;

use std::cell::RefCell;

use common::*;
use nalgebra::DMatrix;
use quadembed::baselines::fit_linear_embeds;
use quadembed::nets::{Autoencoder, AutoencoderSpec, MlpSpec, ParamStore};
use quadembed::odeint::{integrate, linspace, IntegratorConfig};
use quadembed::qdyn::{check_stable_structure, QuadraticModel};
use quadembed::systems::{DatasetMeta, IcSampler, Protocol, SystemKind, TrajectoryDataset};
use quadembed::train::{
    evaluate_loss, fit_quad_embeds, mixed_norm, training_view, Checkpoint, FitOptions, LatentForm, LatentModel,
    LatentSpec, LossWeights, TrainConfig,
};
use rand::Rng;

/// Plain-array forward pass of a skip-connected silu MLP.
fn scratch_mlp(spec: &MlpSpec, p: &ParamStore, x: &[f64]) -> Vec<f64> {
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let layers = spec.layer_dims().len();
    let mut a = x.to_vec();
    for l in 0..layers {
        let (w, b) = (p.tensor(2 * l), p.tensor(2 * l + 1));
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        let h: Vec<f64> = (0..fo)
            .map(|o| b.data()[o] + (0..fi).map(|i| a[i] * w.data()[i * fo + o]).sum::<f64>())
            .collect();
        a = if l + 1 == layers {
            h
        } else if spec.skip && l > 0 {
            h.iter().zip(&a).map(|(v, s)| silu(*v) + s).collect()
        } else {
            h.into_iter().map(silu).collect()
        };
    }
    a
}

/// Directional derivative of `f` at `x` along `v` by a central difference.
fn directional(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    let shift = |s: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + s * h * b).collect() };
    let (p, m) = (f(&shift(1.0)), f(&shift(-1.0)));
    p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

#[test]
fn loss_terms_match_scratch_computation() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (d, n) = (r.random_range(1..=3), r.random_range(1..=4));
        let spec = AutoencoderSpec::mlp(d, n, r.random_range(2..=6), r.random_range(1..=3));
        let ae = Autoencoder::init(spec.clone(), &mut r).unwrap();
        let AutoencoderSpec::Mlp { encoder, decoder } = &spec else { unreachable!() };
        let stable = r.random_bool(0.5);
        let lspec = LatentSpec { dim: n, form: LatentForm::Quadratic, stable, bias: !stable, ridge: 0.0 };
        let mut latent = LatentModel::init(lspec, &mut r).unwrap();
        for t in latent.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
        }
        let model: QuadraticModel = latent.realize().unwrap();
        let rows = r.random_range(1..=6);
        let x = uniform(&mut r, rows * d, 1.0);
        let xd = uniform(&mut r, rows * d, 1.0);
        let w = LossWeights::new(r.random_range(0.5..3.0), r.random_range(0.5..3.0), r.random_range(0.5..3.0));

        let enc = |v: &[f64]| scratch_mlp(encoder, &ae.encoder, v);
        let dec = |v: &[f64]| scratch_mlp(decoder, &ae.decoder, v);
        let (mut recon, mut zfx, mut xfz) = (0.0, 0.0, 0.0);
        for k in 0..rows {
            let (xk, xdk) = (&x[k * d..(k + 1) * d], &xd[k * d..(k + 1) * d]);
            let z = enc(xk);
            let f = model.rhs(&z).unwrap();
            let rec: Vec<f64> = xk.iter().zip(dec(&z)).map(|(a, b)| a - b).collect();
            let zdot = directional(&enc, xk, xdk);
            let rz: Vec<f64> = zdot.iter().zip(&f).map(|(a, b)| a - b).collect();
            let xdot = directional(&dec, &z, &f);
            let rx: Vec<f64> = xdk.iter().zip(&xdot).map(|(a, b)| a - b).collect();
            recon += mixed_norm(&rec) / rows as f64;
            zfx += mixed_norm(&rz) / rows as f64;
            xfz += mixed_norm(&rx) / rows as f64;
        }
        let got = evaluate_loss(&ae, &latent, &x, &xd, &w).unwrap();
        assert!(rel_err(got.recon, recon) < 1e-12, "seed {seed}: recon {} vs {recon}", got.recon);
        assert!(rel_err(got.z_from_x, zfx) < 1e-6, "seed {seed}: z term {} vs {zfx}", got.z_from_x);
        assert!(rel_err(got.x_from_z.unwrap(), xfz) < 1e-6, "seed {seed}: x term");
        let total = w.recon * recon + w.x_from_z * xfz + w.z_from_x * zfx;
        assert!(rel_err(w.combine(&got), total) < 1e-6);
    }
}

#[test]
fn linear_encoder_jacobian_is_its_weight() {
    let lin = MlpSpec { input: 3, output: 2, width: 0, hidden_layers: 0, skip: false };
    let spec = AutoencoderSpec::Mlp { encoder: lin, decoder: MlpSpec { input: 2, output: 3, ..lin } };
    let ae = Autoencoder::init(spec, &mut rng(4)).unwrap();
    let w = ae.encoder.tensor(0).data().to_vec();
    let jac = ae.encoder_jacobian(&[0.3, -1.2, 2.0]).unwrap();
    for row in 0..2 {
        for col in 0..3 {
            assert!((jac.data()[row * 3 + col] - w[col * 2 + row]).abs() < 1e-15);
        }
    }
}

/// Trajectories of `ż = A z` observed through `obs`, with exact derivatives.
fn linear_system_dataset(obs: fn(f64) -> f64, obs_d: fn(f64) -> f64) -> TrajectoryDataset {
    let a = DMatrix::from_row_slice(2, 2, &[-0.1, 1.0, -1.0, -0.1]);
    let times = linspace(0.0, 6.0, 60);
    let mut g = rng(9);
    let (mut all_t, mut states, mut derivs, mut offsets) = (Vec::new(), Vec::new(), Vec::new(), vec![0]);
    for _ in 0..6 {
        let z0 = uniform(&mut g, 2, 1.0);
        let traj = integrate(
            |z: &[f64], o: &mut [f64]| {
                o[0] = a[(0, 0)] * z[0] + a[(0, 1)] * z[1];
                o[1] = a[(1, 0)] * z[0] + a[(1, 1)] * z[1];
            },
            &z0,
            &times,
            &IntegratorConfig::dopri5(1e-10, 1e-12),
        )
        .unwrap();
        for k in 0..traj.len() {
            let z = traj.row(k);
            let zd = [a[(0, 0)] * z[0] + a[(0, 1)] * z[1], a[(1, 0)] * z[0] + a[(1, 1)] * z[1]];
            states.extend(z.iter().map(|&v| obs(v)));
            derivs.extend(z.iter().zip(&zd).map(|(&v, &dv)| obs_d(v) * dv));
            all_t.push(times[k]);
        }
        offsets.push(all_t.len());
    }
    let meta = DatasetMeta {
        system: SystemKind::Pendulum,
        seed: 9,
        stream: 0,
        ic: IcSampler::Explicit(vec![]),
        t_span: (0.0, 6.0),
        samples_per_traj: 60,
        scale: 1.0,
    };
    TrajectoryDataset::from_parts(meta, 2, all_t, states, derivs, offsets).unwrap()
}

/// A heavier reconstruction weight keeps these tiny problems out of the
/// collapsed minimum where the encoder outputs a constant.
fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lambda: [10.0, 0.0, 1.0],
        latent_dim: 2,
        width: 8,
        hidden_layers: 2,
        lr: 5e-3,
        batch_size: 32,
        epochs,
        decay_every: epochs,
        ..TrainConfig::for_system(SystemKind::Pendulum)
    }
}

#[test]
fn linear_embeddings_fit_linear_data() {
    let ds = linear_system_dataset(|v| v, |_| 1.0);
    let out = fit_linear_embeds(&ds, &small_config(300), FitOptions::default()).unwrap();
    let (first, last) = (out.history.first().unwrap(), out.history.last().unwrap());
    assert!(last.recon < 0.02 && last.z_from_x < 0.02, "{last:?}");
    assert!(last.total < 0.1 * first.total, "loss {} -> {}", first.total, last.total);
}

#[test]
fn linear_embeddings_undo_an_invertible_observation() {
    let ds = linear_system_dataset(f64::tanh, |v| 1.0 - v.tanh().powi(2));
    let cfg = small_config(300);
    let lin = fit_linear_embeds(&ds, &cfg, FitOptions::default()).unwrap();
    let quad = fit_quad_embeds(&ds, &cfg, FitOptions::default()).unwrap();
    let (l, q) = (lin.history.last().unwrap().total, quad.history.last().unwrap().total);
    assert!(l < 0.15, "linear-embeds loss {l}");
    assert!(l < 2.0 * q, "linear-embeds {l} vs quad-embeds {q}");
}

#[test]
fn stable_training_keeps_stable_structure_at_every_checkpoint() {
    let train = Protocol::train(SystemKind::Pendulum).generate(2, 0).unwrap().first_trajectories(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let seen = RefCell::new(Vec::new());
    let mut check = |_: &quadembed::train::EpochRecord| {
        if path.exists() {
            let ck = Checkpoint::read(&path).unwrap();
            check_stable_structure(&ck.model.model().unwrap(), 1e-12).unwrap();
            seen.borrow_mut().push(ck.epoch);
        }
    };
    let cfg = TrainConfig { decay_every: 2, ..small_config(12) };
    let out = fit_quad_embeds(
        &train,
        &cfg,
        FitOptions { checkpoint_dir: Some(dir.path()), on_epoch: Some(&mut check) },
    )
    .unwrap();
    check_stable_structure(&out.latent.realize().unwrap(), 1e-12).unwrap();
    let mut epochs = seen.into_inner();
    epochs.dedup();
    assert_eq!(epochs, vec![2, 4, 6, 8, 10]);
}

#[test]
fn every_benchmark_configuration_makes_progress() {
    for (system, epochs, n_traj) in [(SystemKind::Pendulum, 30, 50), (SystemKind::Lv, 30, 10), (SystemKind::Burgers, 3, 1)] {
        let data = Protocol::train(system).generate(0, 0).unwrap().first_trajectories(n_traj);
        let view = training_view(&data);
        let cfg = TrainConfig::for_system(system).with_epochs(epochs);
        let out = fit_quad_embeds(&view, &cfg, FitOptions::default()).unwrap();
        let (first, last) = (out.history.first().unwrap().total, out.history.last().unwrap().total);
        assert!(last < first, "{system:?}: loss {first} -> {last}");
    }
}

#[test]
fn same_seed_gives_identical_history() {
    let train = Protocol::train(SystemKind::Lv).generate(1, 0).unwrap();
    let cfg = TrainConfig::for_system(SystemKind::Lv).with_epochs(4);
    let a = fit_quad_embeds(&train, &cfg, FitOptions::default()).unwrap();
    let b = fit_quad_embeds(&train, &cfg, FitOptions::default()).unwrap();
    assert_eq!(a.history.records, b.history.records);
    assert_eq!(a.latent, b.latent);
    let other = fit_quad_embeds(&train, &TrainConfig { seed: 2, ..cfg }, FitOptions::default()).unwrap();
    assert_ne!(a.history.records, other.history.records);
}

