//! Explicit Runge–Kutta integration of autonomous systems `ż = f(z)`.
//!
//! The adaptive method is Dormand–Prince 5(4) with the step-size control and
//! quartic dense output of the common `RK45` implementation (error norm is the
//! RMS of the scaled local error, safety 0.9, step factors in [0.2, 10]).
//! Samples requested between accepted steps are read off the dense output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with steps no larger than `dt`.
    Rk4 { dt: f64 },
    /// Adaptive Dormand–Prince 5(4).
    Dopri5,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub first_step: Option<f64>,
    /// Abort when `‖z‖₂` exceeds this value.
    pub blowup_norm: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            rtol: 1e-3,
            atol: 1e-6,
            max_step: f64::INFINITY,
            first_step: None,
            blowup_norm: 1e6,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn rk4(dt: f64) -> Self {
        Self {
            method: Method::Rk4 { dt },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!(
                "tolerances must be positive (rtol {}, atol {})",
                self.rtol, self.atol
            )));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::Config("max_step must be positive".into()));
        }
        if let Method::Rk4 { dt } = self.method {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Config(format!("rk4 step {dt} must be positive")));
            }
        }
        Ok(())
    }
}

/// Samples of a trajectory, row-major `len x dim`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim));
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn push(&mut self, row: &[f64]) {
        self.data.extend_from_slice(row);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureReason {
    StepUnderflow,
    NonFinite,
    BlowUp,
    MaxSteps,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FailureReason::StepUnderflow => "step size underflow",
            FailureReason::NonFinite => "non-finite state",
            FailureReason::BlowUp => "state norm exceeded blow-up guard",
            FailureReason::MaxSteps => "maximum number of steps reached",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrationFailure {
    pub last_time: f64,
    pub reason: FailureReason,
}

/// Result of an integration that may have stopped early. On failure the
/// trajectory holds the samples computed before the last valid time.
#[derive(Clone, Debug)]
pub struct IntegrationReport {
    pub trajectory: Trajectory,
    pub failure: Option<IntegrationFailure>,
}

impl IntegrationReport {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Integrates from `sample_times[0]` with `z(sample_times[0]) = z0` and returns
/// the state at every sample time. Failures become [`Error::Integration`].
pub fn integrate<F>(rhs: F, z0: &[f64], sample_times: &[f64], cfg: &IntegratorConfig) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let report = integrate_with_report(rhs, z0, sample_times, cfg)?;
    match report.failure {
        None => Ok(report.trajectory),
        Some(f) => Err(Error::Integration {
            last_time: f.last_time,
            reason: f.reason.to_string(),
        }),
    }
}

/// Like [`integrate`] but keeps the partial trajectory on failure.
pub fn integrate_with_report<F>(
    mut rhs: F,
    z0: &[f64],
    sample_times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<IntegrationReport>
where
    F: FnMut(&[f64], &mut [f64]),
{
    cfg.validate()?;
    if z0.is_empty() {
        return Err(Error::Contract("empty initial state".into()));
    }
    if sample_times.is_empty() {
        return Err(Error::Contract("no sample times".into()));
    }
    if sample_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract("sample times must be strictly ascending".into()));
    }
    let mut f0 = vec![0.0; z0.len()];
    rhs(z0, &mut f0);
    if !z0.iter().chain(&f0).all(|v| v.is_finite()) {
        return Err(Error::Contract("right-hand side not finite at the initial state".into()));
    }
    Ok(match cfg.method {
        Method::Rk4 { dt } => rk4(&mut rhs, z0, sample_times, dt, cfg),
        Method::Dopri5 => dopri5(&mut rhs, z0, f0, sample_times, cfg),
    })
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_state(y: &[f64], cfg: &IntegratorConfig) -> Option<FailureReason> {
    if !y.iter().all(|v| v.is_finite()) {
        Some(FailureReason::NonFinite)
    } else if norm2(y) > cfg.blowup_norm {
        Some(FailureReason::BlowUp)
    } else {
        None
    }
}

fn rk4<F: FnMut(&[f64], &mut [f64])>(
    rhs: &mut F,
    z0: &[f64],
    times: &[f64],
    dt: f64,
    cfg: &IntegratorConfig,
) -> IntegrationReport {
    let n = z0.len();
    let mut traj = Trajectory::new(n, Vec::with_capacity(times.len() * n));
    traj.push(z0);
    let mut y = z0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut t = times[0];
    let mut steps = 0usize;
    for &t_next in &times[1..] {
        let span = t_next - t;
        let m = (span / dt).ceil().max(1.0) as usize;
        let h = span / m as f64;
        for s in 0..m {
            rhs(&y, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            rhs(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            rhs(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + h * k3[i];
            }
            rhs(&tmp, &mut k4);
            for i in 0..n {
                tmp[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            steps += 1;
            let reason = check_state(&tmp, cfg)
                .or_else(|| (steps > cfg.max_steps).then_some(FailureReason::MaxSteps));
            if let Some(reason) = reason {
                return IntegrationReport {
                    trajectory: traj,
                    failure: Some(IntegrationFailure {
                        last_time: t + s as f64 * h,
                        reason,
                    }),
                };
            }
            std::mem::swap(&mut y, &mut tmp);
        }
        t = t_next;
        traj.push(&y);
    }
    IntegrationReport {
        trajectory: traj,
        failure: None,
    }
}

// Dormand–Prince 5(4) tableau. The right-hand sides are autonomous, so the
// stage nodes are not needed.
const A: [[f64; 5]; 6] = [
    [0.0; 5],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// Difference between the fifth- and fourth-order weights (seven stages).
const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];
/// Quartic dense-output coefficients: `y(t + θh) = y + h Σ_j (Kᵀ P)_j θ^(j+1)`.
const P: [[f64; 4]; 7] = [
    [
        1.0,
        -8048581381.0 / 2820520608.0,
        8663915743.0 / 2820520608.0,
        -12715105075.0 / 11282082432.0,
    ],
    [0.0, 0.0, 0.0, 0.0],
    [
        0.0,
        131558114200.0 / 32700410799.0,
        -68118460800.0 / 10900136933.0,
        87487479700.0 / 32700410799.0,
    ],
    [
        0.0,
        -1754552775.0 / 470086768.0,
        14199869525.0 / 1410260304.0,
        -10690763975.0 / 1880347072.0,
    ],
    [
        0.0,
        127303824393.0 / 49829197408.0,
        -318862633887.0 / 49829197408.0,
        701980252875.0 / 199316789632.0,
    ],
    [
        0.0,
        -282668133.0 / 205662961.0,
        2019193451.0 / 616988883.0,
        -1453857185.0 / 822651844.0,
    ],
    [
        0.0,
        40617522.0 / 29380423.0,
        -110615467.0 / 29380423.0,
        69997945.0 / 29380423.0,
    ],
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXPONENT: f64 = -1.0 / 5.0;

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt()
}

fn initial_step<F: FnMut(&[f64], &mut [f64])>(
    rhs: &mut F,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    cfg: &IntegratorConfig,
) -> f64 {
    let n = y0.len();
    let scale: Vec<f64> = y0.iter().map(|y| cfg.atol + y.abs() * cfg.rtol).collect();
    let d0 = rms(y0.iter().zip(&scale).map(|(y, s)| y / s), n);
    let d1 = rms(f0.iter().zip(&scale).map(|(f, s)| f / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; n];
    rhs(&y1, &mut f1);
    let d2 = rms(
        f1.iter().zip(f0).zip(&scale).map(|((a, b), s)| (a - b) / s),
        n,
    ) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(span)
}

fn dopri5<F: FnMut(&[f64], &mut [f64])>(
    rhs: &mut F,
    z0: &[f64],
    f0: Vec<f64>,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> IntegrationReport {
    let n = z0.len();
    let t_end = *times.last().unwrap();
    let mut traj = Trajectory::new(n, Vec::with_capacity(times.len() * n));
    traj.push(z0);
    let mut next_sample = 1;
    if next_sample == times.len() {
        return IntegrationReport {
            trajectory: traj,
            failure: None,
        };
    }

    let mut t = times[0];
    let mut y = z0.to_vec();
    let mut f = f0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut dense = vec![[0.0f64; 4]; n];
    let mut h_abs = match cfg.first_step {
        Some(h) => h,
        None => initial_step(rhs, &y, &f, t_end - t, cfg),
    }
    .min(cfg.max_step);
    let mut steps = 0usize;

    let fail = |traj: Trajectory, t: f64, reason| IntegrationReport {
        trajectory: traj,
        failure: Some(IntegrationFailure {
            last_time: t,
            reason,
        }),
    };

    while t < t_end {
        steps += 1;
        if steps > cfg.max_steps {
            return fail(traj, t, FailureReason::MaxSteps);
        }
        let min_step = 10.0 * (next_up(t) - t).abs();
        h_abs = h_abs.clamp(min_step, cfg.max_step);
        let mut rejected = false;
        let h;
        let t_new;
        loop {
            if h_abs < min_step {
                return fail(traj, t, FailureReason::StepUnderflow);
            }
            let mut tn = t + h_abs;
            if tn > t_end {
                tn = t_end;
            }
            let hh = tn - t;
            h_abs = hh.abs();

            k[0].copy_from_slice(&f);
            for s in 1..6 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, a) in A[s][..s].iter().enumerate() {
                        acc += a * k[j][i];
                    }
                    stage[i] = y[i] + hh * acc;
                }
                rhs(&stage, &mut k[s]);
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (j, b) in B.iter().enumerate() {
                    acc += b * k[j][i];
                }
                y_new[i] = y[i] + hh * acc;
            }
            rhs(&y_new, &mut f_new);
            k[6].copy_from_slice(&f_new);

            let mut sq = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for (j, ej) in E.iter().enumerate() {
                    e += ej * k[j][i];
                }
                let scale = cfg.atol + y[i].abs().max(y_new[i].abs()) * cfg.rtol;
                let r = hh * e / scale;
                sq += r * r;
            }
            let err = (sq / n as f64).sqrt();
            // An overflowing trial step is rejected with the largest shrink.
            if !err.is_finite() {
                h_abs *= MIN_FACTOR;
                rejected = true;
                continue;
            }
            if err < 1.0 {
                let mut factor = if err == 0.0 {
                    MAX_FACTOR
                } else {
                    MAX_FACTOR.min(SAFETY * err.powf(ERROR_EXPONENT))
                };
                if rejected {
                    factor = factor.min(1.0);
                }
                h_abs *= factor;
                h = hh;
                t_new = tn;
                break;
            }
            h_abs *= MIN_FACTOR.max(SAFETY * err.powf(ERROR_EXPONENT));
            rejected = true;
        }

        if let Some(reason) = check_state(&y_new, cfg) {
            return fail(traj, t, reason);
        }

        // Dense output on (t, t_new].
        if times[next_sample] <= t_new {
            for i in 0..n {
                let mut q = [0.0; 4];
                for (j, pj) in P.iter().enumerate() {
                    for c in 0..4 {
                        q[c] += k[j][i] * pj[c];
                    }
                }
                dense[i] = q;
            }
            while next_sample < times.len() && times[next_sample] <= t_new {
                let ts = times[next_sample];
                if ts == t_new {
                    traj.push(&y_new);
                } else {
                    let theta = (ts - t) / h;
                    for i in 0..n {
                        let q = dense[i];
                        let poly = theta * (q[0] + theta * (q[1] + theta * (q[2] + theta * q[3])));
                        stage[i] = y[i] + h * poly;
                    }
                    traj.push(&stage);
                }
                next_sample += 1;
            }
        }

        t = t_new;
        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut f, &mut f_new);
    }

    IntegrationReport {
        trajectory: traj,
        failure: None,
    }
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Equidistant grid of `count` points on `[start, end]`.
pub fn linspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (end - start) / (count - 1) as f64;
            (0..count)
                .map(|i| if i == count - 1 { end } else { start + step * i as f64 })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(z: &[f64], out: &mut [f64]) {
        out[0] = -z[0];
    }

    #[test]
    fn dense_output_reproduces_step_end() {
        for (j, row) in P.iter().enumerate() {
            let b = B.get(j).copied().unwrap_or(0.0);
            assert!((row.iter().sum::<f64>() - b).abs() < 1e-14, "row {j}");
        }
        assert!(E.iter().sum::<f64>().abs() < 1e-15);
        let nodes = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0];
        for (s, row) in A.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - nodes[s]).abs() < 1e-14);
        }
    }

    #[test]
    fn exponential_decay_default_tolerances() {
        // Reference value from an independent RK45 implementation at default tolerances.
        let traj = integrate(decay, &[1.0], &[0.0, 1.0], &IntegratorConfig::default()).unwrap();
        assert!((traj.row(1)[0] - 0.368_090_076_476_216_94).abs() < 1e-12);
        assert!((traj.row(1)[0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let osc = |z: &[f64], out: &mut [f64]| {
            out[0] = z[1];
            out[1] = -z[0];
        };
        let tau = 2.0 * std::f64::consts::PI;
        let traj = integrate(osc, &[1.0, 0.0], &[0.0, tau], &IntegratorConfig::default()).unwrap();
        let end = traj.row(1);
        assert!((end[0] - 0.999_917_327_212_279_3).abs() < 1e-12, "{end:?}");
        assert!((end[1] + 0.001_501_640_538_123_627_5).abs() < 1e-12, "{end:?}");
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let exact = (-2.0f64).exp();
        let err = |dt: f64| {
            let t = integrate(decay, &[1.0], &[0.0, 2.0], &IntegratorConfig::rk4(dt)).unwrap();
            (t.row(1)[0] - exact).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn dense_samples_match_analytic() {
        let times = linspace(0.0, 5.0, 101);
        let traj = integrate(decay, &[2.0], &times, &IntegratorConfig::dopri5(1e-8, 1e-10)).unwrap();
        assert_eq!(traj.len(), 101);
        for (k, &t) in times.iter().enumerate() {
            assert!((traj.row(k)[0] - 2.0 * (-t).exp()).abs() < 1e-7);
        }
    }

    #[test]
    fn blowup_reports_last_valid_time() {
        // ż = z², z0 = 1 explodes at t = 1.
        let f = |z: &[f64], out: &mut [f64]| out[0] = z[0] * z[0];
        let times = linspace(0.0, 2.0, 21);
        let report = integrate_with_report(f, &[1.0], &times, &IntegratorConfig::default()).unwrap();
        let failure = report.failure.expect("must fail");
        assert!(failure.last_time < 1.0 && failure.last_time > 0.9, "{failure:?}");
        assert!(report.trajectory.len() < 21);
        assert!(integrate(f, &[1.0], &times, &IntegratorConfig::default()).is_err());
    }

    #[test]
    fn overflowing_trial_step_is_retried() {
        // Lotka-Volterra in log coordinates: an early trial step overflows exp().
        let lv = |z: &[f64], out: &mut [f64]| {
            out[0] = -z[1].exp() - 0.05 * z[0] + 1.0;
            out[1] = z[0].exp() - 0.05 * z[1] - 2.0;
        };
        let times = linspace(0.0, 30.0, 4000);
        let x0 = [-1.436_357_961_273_633_7, -0.838_946_865_619_765_7];
        let traj = integrate(lv, &x0, &times, &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.len(), 4000);
        // Reference values from an independent RK45 implementation.
        assert!((traj.row(360)[0] - 1.005_605_745_958_070_5).abs() < 1e-8);
        assert!((traj.row(3999)[0] - 0.337_487_219_827_892_65).abs() < 1e-8);
        assert!((traj.row(3999)[1] - 0.277_077_963_640_327_33).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = IntegratorConfig::default();
        assert!(integrate(decay, &[1.0], &[0.0, 0.0], &cfg).is_err());
        assert!(integrate(decay, &[1.0], &[1.0, 0.5], &cfg).is_err());
        let bad = IntegratorConfig::dopri5(0.0, 1e-6);
        assert!(matches!(integrate(decay, &[1.0], &[0.0, 1.0], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic() {
        let osc = |z: &[f64], out: &mut [f64]| {
            out[0] = z[1] - 0.1 * z[0] * z[0];
            out[1] = -z[0].sin();
        };
        let times = linspace(0.0, 20.0, 300);
        let a = integrate(osc, &[0.3, 1.0], &times, &IntegratorConfig::default()).unwrap();
        let b = integrate(osc, &[0.3, 1.0], &times, &IntegratorConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(0.0, 25.0, 100);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[99], 25.0);
    }
}
