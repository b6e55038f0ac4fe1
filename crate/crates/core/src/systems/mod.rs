//! Benchmark systems with exact right-hand sides and the data protocols used
//! to sample them.

mod dataset;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odeint::linspace;
use crate::qdyn::QuadraticModel;

pub use dataset::{generate_dataset, DatasetMeta, IcSampler, TrajectoryDataset};

/// Damped pendulum in first-order form, `x = (velocity, angle)`.
pub fn pendulum_rhs(x: &[f64], out: &mut [f64]) {
    out[0] = -x[1].sin() - 0.025 * x[0];
    out[1] = x[0];
}

/// Dissipative Lotka–Volterra system in log coordinates, `s = (q, p)`.
pub fn lv_rhs(s: &[f64], out: &mut [f64]) {
    let (q, p) = (s[0], s[1]);
    out[0] = -p.exp() - 0.05 * q + 1.0;
    out[1] = q.exp() - 0.05 * p - 2.0;
}

/// Uniform interior grid on (0, 1) with homogeneous Dirichlet walls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurgersGrid {
    pub points: usize,
}

impl Default for BurgersGrid {
    fn default() -> Self {
        Self { points: 256 }
    }
}

impl BurgersGrid {
    pub fn spacing(&self) -> f64 {
        1.0 / (self.points + 1) as f64
    }

    /// Interior node coordinates `x_j = (j + 1) h`.
    pub fn nodes(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points).map(|j| (j + 1) as f64 * h).collect()
    }
}

/// `u_t = u_xx - u u_x - u³ u_x` with central differences and zero ghost values.
pub fn burgers_rhs(grid: &BurgersGrid, u: &[f64], out: &mut [f64]) {
    let n = grid.points;
    debug_assert_eq!(u.len(), n);
    let h = grid.spacing();
    let inv_h2 = 1.0 / (h * h);
    let inv_2h = 0.5 / h;
    for j in 0..n {
        let left = if j == 0 { 0.0 } else { u[j - 1] };
        let right = if j + 1 == n { 0.0 } else { u[j + 1] };
        let uj = u[j];
        let uxx = (right - 2.0 * uj + left) * inv_h2;
        let ux = (right - left) * inv_2h;
        out[j] = uxx - (uj + uj * uj * uj) * ux;
    }
}

/// `u(x, 0) = 10 sin(π f x) x (1 - x)` on the interior nodes.
pub fn burgers_ic(grid: &BurgersGrid, f: f64) -> Vec<f64> {
    grid.nodes()
        .into_iter()
        .map(|x| 10.0 * (std::f64::consts::PI * x * f).sin() * x * (1.0 - x))
        .collect()
}

/// Scalar rational system `ẋ = -x / (1 + x)`.
pub fn rational_rhs(x: f64) -> f64 {
    -x / (1.0 + x)
}

/// Lifting `x ↦ (x, 1/(1+x), x/(1+x)²)` under which the rational system is quadratic.
pub fn rational_lift(x: f64) -> [f64; 3] {
    let s = 1.0 / (1.0 + x);
    [x, s, x * s * s]
}

/// Exact quadratic dynamics of the lifted rational system:
/// `ẏ = (-y₁y₂, y₂y₃, 2y₃² - y₂y₃)`, with `x = y₁`.
pub fn rational_lifted_model() -> QuadraticModel {
    let mut h = vec![DMatrix::zeros(3, 3); 3];
    h[0][(0, 1)] = -1.0;
    h[1][(1, 2)] = 1.0;
    h[1][(2, 2)] = -1.0;
    h[2][(2, 2)] = 2.0;
    QuadraticModel::new(DMatrix::zeros(3, 3), h, None).expect("consistent shapes")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Pendulum,
    Lv,
    Burgers,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [SystemKind::Pendulum, SystemKind::Lv, SystemKind::Burgers];

    pub fn tag(self) -> &'static str {
        match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::Lv => "lv",
            SystemKind::Burgers => "burgers",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            SystemKind::Pendulum | SystemKind::Lv => 2,
            SystemKind::Burgers => BurgersGrid::default().points,
        }
    }

    /// Evaluates the ground-truth vector field.
    pub fn rhs(self, x: &[f64], out: &mut [f64]) {
        match self {
            SystemKind::Pendulum => pendulum_rhs(x, out),
            SystemKind::Lv => lv_rhs(x, out),
            SystemKind::Burgers => burgers_rhs(&BurgersGrid::default(), x, out),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(SystemKind::Pendulum),
            "lv" => Ok(SystemKind::Lv),
            "burgers" => Ok(SystemKind::Burgers),
            other => Err(Error::Config(format!(
                "unknown system '{other}' (expected pendulum, lv or burgers)"
            ))),
        }
    }
}

/// Sampling protocol for one data split.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub system: SystemKind,
    pub n_traj: usize,
    pub samples_per_traj: usize,
    pub t_span: (f64, f64),
    pub ic: IcSampler,
}

/// Index into the sorted frequency list of the Burgers test split.
pub const BURGERS_TEST_INDICES: [usize; 4] = [2, 5, 8, 11];

/// The 13 Burgers frequencies split into (train, test).
pub fn burgers_frequencies() -> (Vec<f64>, Vec<f64>) {
    let all = linspace(2.0, 3.0, 13);
    let (test, train): (Vec<_>, Vec<_>) = all
        .into_iter()
        .enumerate()
        .partition(|(k, _)| BURGERS_TEST_INDICES.contains(k));
    (
        train.into_iter().map(|(_, f)| f).collect(),
        test.into_iter().map(|(_, f)| f).collect(),
    )
}

impl Protocol {
    pub fn train(system: SystemKind) -> Self {
        match system {
            SystemKind::Pendulum => Self {
                system,
                n_traj: 50,
                samples_per_traj: 100,
                t_span: (0.0, 25.0),
                ic: IcSampler::Uniform { low: -3.0, high: 3.0 },
            },
            SystemKind::Lv => Self {
                system,
                n_traj: 10,
                samples_per_traj: 200,
                t_span: (0.0, 10.0),
                ic: IcSampler::Uniform { low: -1.5, high: 1.5 },
            },
            SystemKind::Burgers => {
                let (train, _) = burgers_frequencies();
                Self::burgers(train)
            }
        }
    }

    pub fn test(system: SystemKind) -> Self {
        match system {
            SystemKind::Pendulum => Self {
                n_traj: 100,
                samples_per_traj: 2000,
                t_span: (0.0, 75.0),
                ..Self::train(system)
            },
            SystemKind::Lv => Self {
                n_traj: 100,
                samples_per_traj: 4000,
                t_span: (0.0, 30.0),
                ..Self::train(system)
            },
            SystemKind::Burgers => {
                let (_, test) = burgers_frequencies();
                Self::burgers(test)
            }
        }
    }

    fn burgers(freqs: Vec<f64>) -> Self {
        Self {
            system: SystemKind::Burgers,
            n_traj: freqs.len(),
            samples_per_traj: 1001,
            t_span: (0.0, 1.5),
            ic: IcSampler::BurgersFrequencies(freqs),
        }
    }

    /// Generates the split; `stream` separates random streams of different
    /// splits drawn from the same seed.
    pub fn generate(&self, seed: u64, stream: u64) -> Result<TrajectoryDataset> {
        generate_dataset(
            self.system,
            self.n_traj,
            self.samples_per_traj,
            self.t_span,
            &self.ic,
            seed,
            stream,
        )
    }
}
