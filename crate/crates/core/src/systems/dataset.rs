use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{burgers_ic, BurgersGrid, SystemKind};
use crate::error::{dim_err, Error, Result};
use crate::odeint::{integrate, linspace, IntegratorConfig};

const MAGIC: &[u8; 8] = b"QEMBDS01";

/// How initial conditions are chosen for each trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IcSampler {
    /// Every component drawn independently from `U(low, high)`.
    Uniform { low: f64, high: f64 },
    /// One Burgers initial profile per frequency.
    BurgersFrequencies(Vec<f64>),
    /// Given initial states.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: SystemKind,
    pub seed: u64,
    pub stream: u64,
    pub ic: IcSampler,
    pub t_span: (f64, f64),
    pub samples_per_traj: usize,
    /// Factor applied to states and derivatives after generation.
    pub scale: f64,
}

/// Sampled trajectories with exact derivatives, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    meta: DatasetMeta,
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    derivs: Vec<f64>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: DatasetMeta,
    dim: usize,
    rows: usize,
    offsets: Vec<usize>,
}

impl TrajectoryDataset {
    pub fn from_parts(
        meta: DatasetMeta,
        dim: usize,
        times: Vec<f64>,
        states: Vec<f64>,
        derivs: Vec<f64>,
        offsets: Vec<usize>,
    ) -> Result<Self> {
        let rows = times.len();
        if dim == 0 || states.len() != rows * dim || derivs.len() != rows * dim {
            return Err(dim_err(
                "trajectory_dataset",
                format!(
                    "{rows} times, {} states, {} derivatives for dimension {dim}",
                    states.len(),
                    derivs.len()
                ),
            ));
        }
        let valid_offsets = offsets.first() == Some(&0)
            && offsets.last() == Some(&rows)
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid_offsets {
            return Err(Error::Contract(format!(
                "trajectory offsets must increase from 0 to {rows}"
            )));
        }
        Ok(Self {
            meta,
            dim,
            times,
            states,
            derivs,
            offsets,
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// The first `k` trajectories (all of them if there are fewer).
    pub fn first_trajectories(&self, k: usize) -> Self {
        let k = k.min(self.n_traj());
        let rows = self.offsets[k];
        let mut meta = self.meta.clone();
        match &mut meta.ic {
            IcSampler::Explicit(v) => v.truncate(k),
            IcSampler::BurgersFrequencies(v) => v.truncate(k),
            IcSampler::Uniform { .. } => {}
        }
        Self {
            meta,
            dim: self.dim,
            times: self.times[..rows].to_vec(),
            states: self.states[..rows * self.dim].to_vec(),
            derivs: self.derivs[..rows * self.dim].to_vec(),
            offsets: self.offsets[..=k].to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_traj(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn derivs(&self) -> &[f64] {
        &self.derivs
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn rows_of(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn deriv(&self, i: usize) -> &[f64] {
        &self.derivs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn trajectory_times(&self, k: usize) -> &[f64] {
        &self.times[self.rows_of(k)]
    }

    pub fn trajectory_states(&self, k: usize) -> &[f64] {
        let r = self.rows_of(k);
        &self.states[r.start * self.dim..r.end * self.dim]
    }

    pub fn initial_state(&self, k: usize) -> &[f64] {
        self.state(self.offsets[k])
    }

    pub fn max_abs_state(&self) -> f64 {
        self.states.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multiplies states and derivatives by `factor`. The linear map keeps
    /// every stored derivative consistent with its state.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.states.iter_mut().for_each(|v| *v *= factor);
        out.derivs.iter_mut().for_each(|v| *v *= factor);
        out.meta.scale *= factor;
        out
    }

    /// Largest deviation between stored derivatives and the system's field,
    /// evaluated in the original (unscaled) coordinates.
    pub fn derivative_residual(&self) -> f64 {
        let s = self.meta.scale;
        let mut x = vec![0.0; self.dim];
        let mut f = vec![0.0; self.dim];
        let mut worst: f64 = 0.0;
        for i in 0..self.n_rows() {
            for (xv, sv) in x.iter_mut().zip(self.state(i)) {
                *xv = sv / s;
            }
            self.meta.system.rhs(&x, &mut f);
            for (fv, dv) in f.iter().zip(self.deriv(i)) {
                worst = worst.max((fv - dv / s).abs());
            }
        }
        worst
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            dim: self.dim,
            rows: self.n_rows(),
            offsets: self.offsets.clone(),
        })?;
        let floats = self.times.len() + self.states.len() + self.derivs.len();
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * floats);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.times.iter().chain(&self.states).chain(&self.derivs) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a trajectory dataset (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let rows = header.rows;
        let expected = rows * (1 + 2 * header.dim);
        let payload = &bytes[16 + hlen..];
        if payload.len() != 8 * expected {
            return Err(bad(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                8 * expected
            )));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let times: Vec<f64> = floats.by_ref().take(rows).collect();
        let states: Vec<f64> = floats.by_ref().take(rows * header.dim).collect();
        let derivs: Vec<f64> = floats.collect();
        Self::from_parts(header.meta, header.dim, times, states, derivs, header.offsets)
            .map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

fn initial_conditions(
    system: SystemKind,
    n_traj: usize,
    ic: &IcSampler,
    seed: u64,
    stream: u64,
) -> Result<Vec<Vec<f64>>> {
    let dim = system.state_dim();
    let ics = match ic {
        IcSampler::Uniform { low, high } => {
            if !(low < high) {
                return Err(Error::Config(format!("empty initial-condition range [{low}, {high}]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            (0..n_traj)
                .map(|_| (0..dim).map(|_| rng.random_range(*low..*high)).collect())
                .collect()
        }
        IcSampler::BurgersFrequencies(freqs) => {
            if system != SystemKind::Burgers {
                return Err(Error::Config(format!("frequency sampling is only defined for burgers, not {system}")));
            }
            let grid = BurgersGrid::default();
            freqs.iter().map(|&f| burgers_ic(&grid, f)).collect()
        }
        IcSampler::Explicit(list) => list.clone(),
    };
    if ics.len() != n_traj {
        return Err(Error::Config(format!(
            "sampler provides {} initial conditions, {n_traj} requested",
            ics.len()
        )));
    }
    if let Some(bad) = ics.iter().position(|x| x.len() != dim) {
        return Err(dim_err("generate_dataset", format!("initial condition {bad} is not of length {dim}")));
    }
    Ok(ics)
}

/// Integrates the ground-truth system from each initial condition on an
/// equidistant grid of `samples_per_traj` points and stores exact derivatives.
pub fn generate_dataset(
    system: SystemKind,
    n_traj: usize,
    samples_per_traj: usize,
    t_span: (f64, f64),
    ic: &IcSampler,
    seed: u64,
    stream: u64,
) -> Result<TrajectoryDataset> {
    if n_traj == 0 || samples_per_traj < 2 {
        return Err(Error::Config(format!(
            "need at least one trajectory and two samples (got {n_traj} x {samples_per_traj})"
        )));
    }
    if !(t_span.1 > t_span.0) || !t_span.0.is_finite() || !t_span.1.is_finite() {
        return Err(Error::Config(format!("invalid time span {t_span:?}")));
    }
    let dim = system.state_dim();
    let ics = initial_conditions(system, n_traj, ic, seed, stream)?;
    let grid = linspace(t_span.0, t_span.1, samples_per_traj);
    let cfg = IntegratorConfig::default();
    let rows = n_traj * samples_per_traj;
    let mut times = Vec::with_capacity(rows);
    let mut states = Vec::with_capacity(rows * dim);
    let mut derivs = vec![0.0; rows * dim];
    let mut offsets = vec![0];
    for (index, x0) in ics.iter().enumerate() {
        let traj = integrate(|x, out| system.rhs(x, out), x0, &grid, &cfg).map_err(|e| {
            Error::DatasetGeneration {
                index,
                reason: e.to_string(),
            }
        })?;
        times.extend_from_slice(&grid);
        states.extend_from_slice(traj.data());
        offsets.push(times.len());
    }
    for (x, f) in states.chunks(dim).zip(derivs.chunks_mut(dim)) {
        system.rhs(x, f);
    }
    let meta = DatasetMeta {
        system,
        seed,
        stream,
        ic: ic.clone(),
        t_span,
        samples_per_traj,
        scale: 1.0,
    };
    TrajectoryDataset::from_parts(meta, dim, times, states, derivs, offsets)
}
