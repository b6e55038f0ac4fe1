//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use quadembed::nets::{Autoencoder, AutoencoderSpec, ConvAeSpec};
use quadembed::qdyn::{kron_self, QuadraticModel, StableParams};
use quadembed::tensor::{Graph, Tensor, Var};
use quadembed::train::{build_loss, evaluate_loss, LatentForm, LatentModel, LatentSpec, LossWeights};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

/// Relative error with a small absolute floor so that vanishing gradients do
/// not turn rounding noise into a failure.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error between backward gradients of `sum(w ⊙ build(inputs))`
/// and central differences with step `h`.
pub fn graph_gradient_error(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    weight_seed: u64,
    h: f64,
) -> f64 {
    let objective = |g: &mut Graph, vars: &[Var]| {
        let out = build(g, vars);
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, uniform(&mut rng(weight_seed), n, 1.0)).unwrap();
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        g.sum(prod)
    };
    let value = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let root = objective(&mut g, &vars);
        g.value(root).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = objective(&mut g, &vars);
    g.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let an = g.grad(*v).expect("tracked input").data().to_vec();
        for (i, &a) in an.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(fd, a));
        }
    }
    worst
}

/// Random autoencoder, latent model, batch and loss weights drawn from `seed`.
pub struct LossCase {
    pub ae: Autoencoder,
    pub latent: LatentModel,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
    pub weights: LossWeights,
}

pub fn random_loss_case(seed: u64) -> LossCase {
    let mut r = rng(seed);
    let latent_dim = r.random_range(1..=4);
    let conv = r.random_bool(0.2);
    let spec = if conv {
        AutoencoderSpec::Conv(ConvAeSpec {
            input_len: 16,
            channels: vec![1, 2, 3],
            latent: latent_dim,
            ..ConvAeSpec::default()
        })
    } else {
        AutoencoderSpec::mlp(
            r.random_range(1..=3),
            latent_dim,
            r.random_range(2..=6),
            r.random_range(1..=3),
        )
    };
    let ae = Autoencoder::init(spec, &mut r).unwrap();
    let form = if r.random_bool(0.75) { LatentForm::Quadratic } else { LatentForm::Linear };
    let stable = r.random_bool(0.5);
    let bias = !stable && form == LatentForm::Quadratic && r.random_bool(0.5);
    let ridge = if r.random_bool(0.3) { 1e-8 } else { 0.0 };
    let latent_spec = LatentSpec { dim: latent_dim, form, stable, bias, ridge };
    let mut latent = LatentModel::init(latent_spec, &mut r).unwrap();
    // Move away from the near-zero initialization so every operator matters.
    for t in latent.params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    let batch = r.random_range(1..=5);
    let d = ae.state_dim();
    let x = uniform(&mut r, batch * d, 1.0);
    let xdot = uniform(&mut r, batch * d, 1.0);
    let x_from_z = if r.random_bool(0.5) { r.random_range(0.1..2.0) } else { 0.0 };
    let weights = LossWeights::new(r.random_range(0.1..10.0), x_from_z, r.random_range(0.1..2.0));
    LossCase { ae, latent, x, xdot, weights }
}

/// Worst relative error over every parameter of a random loss configuration,
/// together with the number of checked entries.
pub fn loss_gradient_error(seed: u64, h: f64) -> (f64, usize) {
    let c = random_loss_case(seed);
    let d = c.ae.state_dim();
    let rows = c.x.len() / d;
    let total = |ae: &Autoencoder, lat: &LatentModel| {
        c.weights.combine(&evaluate_loss(ae, lat, &c.x, &c.xdot, &c.weights).unwrap())
    };
    let mut g = Graph::new();
    let av = c.ae.bind(&mut g, true);
    let lv = c.latent.bind(&mut g, true);
    let xv = g.constant(Tensor::new(vec![rows, d], c.x.clone()).unwrap());
    let xdv = g.constant(Tensor::new(vec![rows, d], c.xdot.clone()).unwrap());
    let loss = build_loss(&mut g, &c.ae, &av, &c.latent, &lv, xv, xdv, &c.weights).unwrap();
    g.backward(loss.total).unwrap();

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (group, vars) in [(0, &av.encoder), (1, &av.decoder), (2, &lv)] {
        for (k, v) in vars.iter().enumerate() {
            let an = g.grad(*v).unwrap().data().to_vec();
            for (i, &a) in an.iter().enumerate() {
                let bump = |delta: f64| {
                    let (mut ae, mut lat) = (c.ae.clone(), c.latent.clone());
                    let t = match group {
                        0 => ae.encoder.tensor_mut(k),
                        1 => ae.decoder.tensor_mut(k),
                        _ => lat.params.tensor_mut(k),
                    };
                    t.data_mut()[i] += delta;
                    total(&ae, &lat)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max(rel_err(fd, a));
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Stable parameters with raw entries drawn from `U(-scale, scale)`.
pub fn random_stable_params(rng: &mut impl Rng, n: usize, scale: f64) -> StableParams {
    let j = random_matrix(rng, n, n, scale);
    let l = random_matrix(rng, n, n, scale);
    let h = (0..n).map(|_| random_matrix(rng, n, n, scale)).collect();
    StableParams::new(j, l, h).unwrap()
}

pub fn random_quadratic(rng: &mut impl Rng, n: usize, bias: bool) -> QuadraticModel {
    let a = random_matrix(rng, n, n, 1.0);
    let h = (0..n).map(|_| random_matrix(rng, n, n, 1.0)).collect();
    let b = bias.then(|| DVector::from_vec(uniform(rng, n, 1.0)));
    QuadraticModel::new(a, h, b).unwrap()
}

/// Snapshots on `x = V z + W (z ⊗ z)` with orthonormal `V` (d×r), `W ⊥ V`,
/// `W` symmetric in its Kronecker pairs and a sample set closed under
/// `z → -z`. Returns `(V, W, snapshots)`.
pub fn manifold_snapshots(seed: u64, d: usize, r: usize, samples: usize) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let mut g = rng(seed);
    let q = random_matrix(&mut g, d, d, 1.0).qr().q();
    let v = q.columns(0, r).into_owned();
    let comp = q.columns(r, d - r).into_owned();
    let raw = comp * random_matrix(&mut g, d - r, r * r, 0.1);
    let mut w = DMatrix::zeros(d, r * r);
    for i in 0..r {
        for j in 0..r {
            let sym = 0.5 * (raw.column(i * r + j) + raw.column(j * r + i));
            w.set_column(i * r + j, &sym);
        }
    }
    let mut snaps = Vec::with_capacity(2 * samples * d);
    for _ in 0..samples {
        let z = uniform(&mut g, r, 2.0);
        for sign in [1.0, -1.0] {
            let zs: Vec<f64> = z.iter().map(|v| sign * v).collect();
            let x = &v * DVector::from_column_slice(&zs) + &w * DVector::from_vec(kron_self(&zs));
            snaps.extend(x.iter());
        }
    }
    (v, w, snaps)
}
