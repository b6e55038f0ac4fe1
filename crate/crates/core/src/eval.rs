//! Rollouts through encoder, latent model and decoder, error measures and
//! method comparison reports.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{PodBasis, QuadManifold};
use crate::error::{dim_err, Error, Result};
use crate::nets::Autoencoder;
use crate::odeint::{integrate_with_report, IntegrationFailure, IntegratorConfig};
use crate::qdyn::QuadraticModel;
use crate::systems::TrajectoryDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    QuadEmbeds,
    LinearEmbeds,
    QuadOpinf,
    LinprojQopinf,
    QuadprojQopinf,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::QuadEmbeds,
        Method::LinearEmbeds,
        Method::QuadOpinf,
        Method::LinprojQopinf,
        Method::QuadprojQopinf,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::QuadEmbeds => "quad-embeds",
            Method::LinearEmbeds => "linear-embeds",
            Method::QuadOpinf => "quad-opinf",
            Method::LinprojQopinf => "linproj-qopinf",
            Method::QuadprojQopinf => "quadproj-qopinf",
        }
    }

    /// Whether the method trains an autoencoder.
    pub fn is_embedding(self) -> bool {
        matches!(self, Method::QuadEmbeds | Method::LinearEmbeds)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Maps between full states and the coordinates the latent model lives in.
pub trait Coordinates {
    fn state_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// One state to one latent vector.
    fn encode(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Row-major latent rows to row-major state rows.
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>>;
}

/// A trained method ready for rollouts.
#[derive(Clone, Debug)]
pub enum Surrogate {
    /// Autoencoder trained on data multiplied by `data_scale`.
    Embedding {
        autoencoder: Autoencoder,
        model: QuadraticModel,
        data_scale: f64,
    },
    /// Model acting on the original coordinates.
    Direct { model: QuadraticModel },
    Pod { basis: PodBasis, model: QuadraticModel },
    Manifold { manifold: QuadManifold, model: QuadraticModel },
}

impl Surrogate {
    pub fn model(&self) -> &QuadraticModel {
        match self {
            Surrogate::Embedding { model, .. }
            | Surrogate::Direct { model }
            | Surrogate::Pod { model, .. }
            | Surrogate::Manifold { model, .. } => model,
        }
    }
}

impl Coordinates for Surrogate {
    fn state_dim(&self) -> usize {
        match self {
            Surrogate::Embedding { autoencoder, .. } => autoencoder.state_dim(),
            Surrogate::Direct { model } => model.dim(),
            Surrogate::Pod { basis, .. } => basis.state_dim,
            Surrogate::Manifold { manifold, .. } => manifold.basis.state_dim,
        }
    }

    fn latent_dim(&self) -> usize {
        self.model().dim()
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Surrogate::Embedding {
                autoencoder,
                data_scale,
                ..
            } => {
                let xs: Vec<f64> = x.iter().map(|v| v * data_scale).collect();
                autoencoder.encode_rows(&xs)
            }
            Surrogate::Direct { .. } => Ok(x.to_vec()),
            Surrogate::Pod { basis, .. } => basis.project(x),
            Surrogate::Manifold { manifold, .. } => manifold.encode(x),
        }
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Surrogate::Embedding {
                autoencoder,
                data_scale,
                ..
            } => {
                let mut x = autoencoder.decode_rows(z)?;
                x.iter_mut().for_each(|v| *v /= data_scale);
                Ok(x)
            }
            Surrogate::Direct { .. } => Ok(z.to_vec()),
            Surrogate::Pod { basis, .. } => basis.lift(z),
            Surrogate::Manifold { manifold, .. } => manifold.decode(z),
        }
    }
}

/// Decoded rollout; on integrator failure it holds only the samples reached.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub states: Vec<f64>,
    pub latent: Vec<f64>,
    pub failure: Option<IntegrationFailure>,
}

impl Rollout {
    pub fn n_samples(&self, state_dim: usize) -> usize {
        self.states.len() / state_dim
    }
}

/// Encodes `x0`, integrates the latent model over `sample_times` and decodes
/// every sample.
pub fn rollout<C: Coordinates + ?Sized>(
    coords: &C,
    model: &QuadraticModel,
    x0: &[f64],
    sample_times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Rollout> {
    if x0.len() != coords.state_dim() {
        return Err(dim_err(
            "rollout",
            format!("initial state of length {}, expected {}", x0.len(), coords.state_dim()),
        ));
    }
    let z0 = coords.encode(x0)?;
    if z0.len() != model.dim() {
        return Err(dim_err(
            "rollout",
            format!("latent of length {}, model dimension {}", z0.len(), model.dim()),
        ));
    }
    let report = integrate_with_report(|z, out| model.rhs_into(z, out), &z0, sample_times, cfg)?;
    let latent = report.trajectory.into_data();
    let states = if latent.is_empty() { Vec::new() } else { coords.decode(&latent)? };
    Ok(Rollout {
        states,
        latent,
        failure: report.failure,
    })
}

/// `log₁₀(ε²)` for 64-bit reals: the value reported for an exact match.
pub fn error_floor() -> f64 {
    (f64::EPSILON * f64::EPSILON).log10()
}

fn check_shapes(op: &str, truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Contract(format!(
            "{op}: truth has {} entries, prediction {}",
            truth.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// `log₁₀` of the median over all entries of the squared deviation, clamped
/// below at [`error_floor`].
pub fn error_median_log(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_shapes("error_median_log", truth, pred)?;
    let mut sq: Vec<f64> = truth.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).collect();
    if sq.iter().any(|v| v.is_nan()) {
        return Err(Error::Contract("error_median_log: NaN deviation".into()));
    }
    sq.sort_by(f64::total_cmp);
    let m = sq.len();
    let median = if m % 2 == 1 {
        sq[m / 2]
    } else {
        0.5 * (sq[m / 2 - 1] + sq[m / 2])
    };
    Ok(median.max(f64::EPSILON * f64::EPSILON).log10())
}

/// `‖truth − pred‖ / ‖truth‖` in the entrywise 2-norm.
pub fn error_relative(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_shapes("error_relative", truth, pred)?;
    let den = truth.iter().map(|a| a * a).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::Contract("error_relative: reference has zero norm".into()));
    }
    let num = truth.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Stable unless the integrator aborted or some entry exceeds
/// `1000 × training_amplitude` in magnitude.
pub fn classify_stability(states: &[f64], completed: bool, training_amplitude: f64) -> bool {
    let limit = 1e3 * training_amplitude;
    completed && states.iter().all(|v| v.is_finite() && v.abs() <= limit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Method,
    pub ic_index: usize,
    pub error_median_log: f64,
    pub error_relative: f64,
    pub stable: bool,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub n_stable: usize,
    pub n_unstable: usize,
    /// Quartiles of `error_median_log` over stable rollouts.
    pub quartiles: Option<[f64; 3]>,
    pub median_relative: Option<f64>,
}

/// One record per `(method, test trajectory)` pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl EvalReport {
    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.method) {
                out.push(r.method);
            }
        }
        out
    }

    pub fn for_method(&self, m: Method) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter(move |r| r.method == m)
    }

    pub fn get(&self, m: Method, ic: usize) -> Option<&EvalRecord> {
        self.records.iter().find(|r| r.method == m && r.ic_index == ic)
    }

    /// Aggregates over stable rollouts only; unstable ones are counted.
    pub fn summary(&self, m: Method) -> MethodSummary {
        let stable: Vec<&EvalRecord> = self.for_method(m).filter(|r| r.stable).collect();
        let n_unstable = self.for_method(m).filter(|r| !r.stable).count();
        let mut logs: Vec<f64> = stable.iter().map(|r| r.error_median_log).collect();
        let mut rel: Vec<f64> = stable.iter().map(|r| r.error_relative).collect();
        logs.sort_by(f64::total_cmp);
        rel.sort_by(f64::total_cmp);
        MethodSummary {
            method: m,
            n_stable: stable.len(),
            n_unstable,
            quartiles: (!logs.is_empty()).then(|| [quantile(&logs, 0.25), quantile(&logs, 0.5), quantile(&logs, 0.75)]),
            median_relative: (!rel.is_empty()).then(|| quantile(&rel, 0.5)),
        }
    }

    /// The `k` test indices with the largest `error_median_log` for `method`
    /// (unstable rollouts rank first), ordered worst first.
    pub fn worst_ics(&self, method: Method, k: usize) -> Vec<usize> {
        let mut recs: Vec<&EvalRecord> = self.for_method(method).collect();
        recs.sort_by(|a, b| {
            a.stable
                .cmp(&b.stable)
                .then(b.error_median_log.total_cmp(&a.error_median_log))
                .then(a.ic_index.cmp(&b.ic_index))
        });
        recs.into_iter().take(k).map(|r| r.ic_index).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>()?;
        Ok(Self { records })
    }

    /// One column per method with per-test-trajectory `error_median_log`
    /// values; unstable rollouts are left empty.
    pub fn violin_csv(&self) -> Result<String> {
        let methods = self.methods();
        let mut ics: Vec<usize> = self.records.iter().map(|r| r.ic_index).collect();
        ics.sort_unstable();
        ics.dedup();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(methods.iter().map(|m| m.tag()))?;
        for ic in ics {
            let row: Vec<String> = methods
                .iter()
                .map(|m| match self.get(*m, ic) {
                    Some(r) if r.stable => r.error_median_log.to_string(),
                    _ => String::new(),
                })
                .collect();
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Evaluation of several methods on every trajectory of a test set.
pub struct Comparison {
    pub report: EvalReport,
    /// `rollouts[m][k]`: decoded rollout of method `m` on test trajectory `k`.
    pub rollouts: Vec<Vec<Rollout>>,
}

/// Rolls every method out from each test initial condition over that
/// trajectory's sample times and scores it against the stored truth.
pub fn compare_methods(
    methods: &[(Method, &Surrogate)],
    test: &TrajectoryDataset,
    training_amplitude: f64,
    cfg: &IntegratorConfig,
) -> Result<Comparison> {
    let d = test.dim();
    let mut report = EvalReport::default();
    let mut rollouts = Vec::with_capacity(methods.len());
    for &(method, sur) in methods {
        let mut per_method = Vec::with_capacity(test.n_traj());
        for k in 0..test.n_traj() {
            let times = test.trajectory_times(k);
            let truth = test.trajectory_states(k);
            let ro = rollout(sur, sur.model(), test.initial_state(k), times, cfg)?;
            let n = ro.n_samples(d);
            let reached = &truth[..n * d];
            let stable = classify_stability(&ro.states, ro.failure.is_none(), training_amplitude);
            // a diverged rollout may not admit finite errors; it is excluded
            // from aggregation anyway
            let score = |r: Result<f64>| match r {
                Ok(v) => Ok(v),
                Err(_) if !stable => Ok(f64::INFINITY),
                Err(e) => Err(e),
            };
            report.records.push(EvalRecord {
                method,
                ic_index: k,
                error_median_log: score(error_median_log(reached, &ro.states))?,
                error_relative: score(error_relative(reached, &ro.states))?,
                stable,
                n_samples: n,
            });
            per_method.push(ro);
        }
        rollouts.push(per_method);
    }
    Ok(Comparison { report, rollouts })
}

/// Time, truth and per-method columns for one test trajectory. Rows past a
/// truncated rollout are left empty for that method.
pub fn overlay_csv(times: &[f64], truth: &[f64], methods: &[(Method, &[f64])]) -> Result<String> {
    let d = truth.len() / times.len().max(1);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("truth_{i}")));
    for (m, _) in methods {
        header.extend((0..d).map(|i| format!("{}_{i}", m.tag())));
    }
    w.write_record(&header)?;
    for (k, t) in times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(truth[k * d..(k + 1) * d].iter().map(|v| v.to_string()));
        for (_, states) in methods {
            if (k + 1) * d <= states.len() {
                row.extend(states[k * d..(k + 1) * d].iter().map(|v| v.to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d));
            }
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
