//! Quadratic dynamical systems `ż = A z + H (z ⊗ z) + B` and the
//! parameterization that makes them globally stable.
//!
//! `H` is stored as `n` slices `H_i` of size `n x n`, so that
//! `H (z ⊗ z) = Σ_i z_i H_i z`. The full `n x n²` matrix is `[H_1, ..., H_n]`.
//!
//! With `A = J - R`, `J` skew, `R` symmetric positive semi-definite and every
//! `H_i` skew, the cubic form `zᵀ H (z ⊗ z)` vanishes and
//! `d/dt ½‖z‖² = -zᵀ R z ≤ 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Kronecker square: entry `i * n + j` is `z_i z_j`.
pub fn kron_self(z: &[f64]) -> Vec<f64> {
    z.iter()
        .flat_map(|&zi| z.iter().map(move |&zj| zi * zj))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticModel {
    a: DMatrix<f64>,
    h: Vec<DMatrix<f64>>,
    b: Option<DVector<f64>>,
}

impl QuadraticModel {
    pub fn new(a: DMatrix<f64>, h: Vec<DMatrix<f64>>, b: Option<DVector<f64>>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(dim_err("quadratic_model", format!("A is {}x{}", n, a.ncols())));
        }
        if h.len() != n || h.iter().any(|hi| hi.shape() != (n, n)) {
            return Err(dim_err(
                "quadratic_model",
                format!("expected {n} H slices of {n}x{n}"),
            ));
        }
        if let Some(b) = &b {
            if b.len() != n {
                return Err(dim_err("quadratic_model", format!("B has length {}", b.len())));
            }
        }
        Ok(Self { a, h, b })
    }

    /// `ż = A z`.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, vec![DMatrix::zeros(n, n); n], None)
    }

    pub fn zeros(n: usize, with_bias: bool) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            h: vec![DMatrix::zeros(n, n); n],
            b: with_bias.then(|| DVector::zeros(n)),
        }
    }

    /// Builds the model from the full `n x n²` quadratic operator.
    pub fn from_h_full(
        a: DMatrix<f64>,
        h_full: &DMatrix<f64>,
        b: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = a.nrows();
        if h_full.shape() != (n, n * n) {
            return Err(dim_err(
                "quadratic_model",
                format!("H is {:?}, expected {}x{}", h_full.shape(), n, n * n),
            ));
        }
        let h = (0..n)
            .map(|i| h_full.columns(i * n, n).into_owned())
            .collect();
        Self::new(a, h, b)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn h_slices(&self) -> &[DMatrix<f64>] {
        &self.h
    }

    pub fn h_slices_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.h
    }

    pub fn a_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.a
    }

    pub fn b(&self) -> Option<&DVector<f64>> {
        self.b.as_ref()
    }

    pub fn h_full(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut full = DMatrix::zeros(n, n * n);
        for (i, hi) in self.h.iter().enumerate() {
            full.columns_mut(i * n, n).copy_from(hi);
        }
        full
    }

    /// Right-hand side without dimension checks; `out.len() == z.len() == n`.
    pub fn rhs_into(&self, z: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for r in 0..n {
            let mut acc = self.b.as_ref().map_or(0.0, |b| b[r]);
            for c in 0..n {
                acc += self.a[(r, c)] * z[c];
            }
            for (i, hi) in self.h.iter().enumerate() {
                if z[i] == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for c in 0..n {
                    s += hi[(r, c)] * z[c];
                }
                acc += z[i] * s;
            }
            out[r] = acc;
        }
    }

    pub fn rhs(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(dim_err(
                "quad_rhs",
                format!("state has length {}, model dimension {}", z.len(), self.dim()),
            ));
        }
        let mut out = vec![0.0; z.len()];
        self.rhs_into(z, &mut out);
        Ok(out)
    }
}

/// `A z + Σ_i z_i H_i z + B`.
pub fn quad_rhs(model: &QuadraticModel, z: &[f64]) -> Result<Vec<f64>> {
    model.rhs(z)
}

/// Unconstrained parameters whose realization is always a stable model.
#[derive(Clone, Debug, PartialEq)]
pub struct StableParams {
    pub j_raw: DMatrix<f64>,
    pub l_raw: DMatrix<f64>,
    pub h_raw: Vec<DMatrix<f64>>,
    /// Optional `ε` in `R = L Lᵀ + ε I` for strict definiteness.
    pub ridge: f64,
}

fn skew(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

impl StableParams {
    pub const STRICT_RIDGE: f64 = 1e-8;

    pub fn new(j_raw: DMatrix<f64>, l_raw: DMatrix<f64>, h_raw: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = j_raw.nrows();
        let square = |m: &DMatrix<f64>| m.shape() == (n, n);
        if !square(&j_raw) || !square(&l_raw) || h_raw.len() != n || !h_raw.iter().all(square) {
            return Err(dim_err("stable_params", format!("inconsistent shapes for n = {n}")));
        }
        Ok(Self {
            j_raw,
            l_raw,
            h_raw,
            ridge: 0.0,
        })
    }

    /// `J_raw, H_raw ~ U(-0.01, 0.01)`, `L_raw = 0.1 I`.
    pub fn init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut uniform = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-0.01..0.01));
        let j_raw = uniform(n, n);
        let h_raw = (0..n).map(|_| uniform(n, n)).collect();
        Self {
            j_raw,
            l_raw: DMatrix::identity(n, n) * 0.1,
            h_raw,
            ridge: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.j_raw.nrows()
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn j(&self) -> DMatrix<f64> {
        skew(&self.j_raw)
    }

    pub fn r(&self) -> DMatrix<f64> {
        let n = self.dim();
        &self.l_raw * self.l_raw.transpose() + DMatrix::identity(n, n) * self.ridge
    }

    pub fn h(&self) -> Vec<DMatrix<f64>> {
        self.h_raw.iter().map(skew).collect()
    }

    pub fn realize(&self) -> QuadraticModel {
        QuadraticModel {
            a: self.j() - self.r(),
            h: self.h(),
            b: None,
        }
    }
}

/// `A = J - R` with skew `J`, PSD `R`, skew `H_i`; no constant term.
pub fn realize_stable(p: &StableParams) -> QuadraticModel {
    p.realize()
}

/// `d/dt ½‖z‖² = zᵀ f(z)` for a model without constant term.
pub fn energy_rate(model: &QuadraticModel, z: &[f64]) -> Result<f64> {
    if model.b().is_some() {
        return Err(Error::Contract(
            "energy_rate requires a model without constant term".into(),
        ));
    }
    let f = model.rhs(z)?;
    Ok(z.iter().zip(&f).map(|(a, b)| a * b).sum())
}

/// Checks the structural invariants of a realized stable model.
pub fn check_stable_structure(model: &QuadraticModel, tol: f64) -> std::result::Result<(), String> {
    if model.b().is_some() {
        return Err("constant term present".into());
    }
    let a = model.a();
    let r = -(a + a.transpose()) * 0.5;
    let eig = r.clone().symmetric_eigen();
    let scale = r.amax().max(1.0);
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -tol * scale {
            return Err(format!("symmetric part of -A has eigenvalue {min}"));
        }
    }
    for (i, hi) in model.h_slices().iter().enumerate() {
        let asym = (hi + hi.transpose()).amax();
        if asym > tol * hi.amax().max(1.0) {
            return Err(format!("H_{i} is not skew (|H + Hᵀ| = {asym})"));
        }
    }
    Ok(())
}

/// Serialized form of a quadratic model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModelRecord {
    Stable {
        version: u32,
        n: usize,
        j_raw: Vec<f64>,
        l_raw: Vec<f64>,
        h_raw: Vec<Vec<f64>>,
        #[serde(default)]
        ridge: f64,
    },
    Unconstrained {
        version: u32,
        n: usize,
        a: Vec<f64>,
        h: Vec<Vec<f64>>,
        b: Option<Vec<f64>>,
    },
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn from_row_major(n: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != n * n {
        return Err(dim_err("model_record", format!("{} values for {n}x{n}", data.len())));
    }
    Ok(DMatrix::from_row_slice(n, n, data))
}

impl ModelRecord {
    pub fn from_stable(p: &StableParams) -> Self {
        ModelRecord::Stable {
            version: MODEL_FORMAT_VERSION,
            n: p.dim(),
            j_raw: row_major(&p.j_raw),
            l_raw: row_major(&p.l_raw),
            h_raw: p.h_raw.iter().map(row_major).collect(),
            ridge: p.ridge,
        }
    }

    pub fn from_model(m: &QuadraticModel) -> Self {
        ModelRecord::Unconstrained {
            version: MODEL_FORMAT_VERSION,
            n: m.dim(),
            a: row_major(m.a()),
            h: m.h_slices().iter().map(row_major).collect(),
            b: m.b().map(|b| b.as_slice().to_vec()),
        }
    }

    fn check_version(v: u32) -> Result<()> {
        if v != MODEL_FORMAT_VERSION {
            return Err(Error::Contract(format!("unsupported model format version {v}")));
        }
        Ok(())
    }

    pub fn stable_params(&self) -> Result<Option<StableParams>> {
        match self {
            ModelRecord::Stable {
                version,
                n,
                j_raw,
                l_raw,
                h_raw,
                ridge,
            } => {
                Self::check_version(*version)?;
                let h = h_raw
                    .iter()
                    .map(|s| from_row_major(*n, s))
                    .collect::<Result<Vec<_>>>()?;
                let p = StableParams::new(from_row_major(*n, j_raw)?, from_row_major(*n, l_raw)?, h)?;
                Ok(Some(p.with_ridge(*ridge)))
            }
            ModelRecord::Unconstrained { .. } => Ok(None),
        }
    }

    pub fn model(&self) -> Result<QuadraticModel> {
        match self {
            ModelRecord::Stable { .. } => Ok(self.stable_params()?.expect("stable").realize()),
            ModelRecord::Unconstrained {
                version,
                n,
                a,
                h,
                b,
            } => {
                Self::check_version(*version)?;
                let h = h
                    .iter()
                    .map(|s| from_row_major(*n, s))
                    .collect::<Result<Vec<_>>>()?;
                QuadraticModel::new(
                    from_row_major(*n, a)?,
                    h,
                    b.as_ref().map(|b| DVector::from_column_slice(b)),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn kron_examples() {
        assert_eq!(kron_self(&[1.0, 2.0]), vec![1.0, 2.0, 2.0, 4.0]);
        assert_eq!(kron_self(&[0.0, 0.0]), vec![0.0; 4]);
        assert_eq!(
            kron_self(&[2.0, -1.0, 3.0]),
            vec![4.0, -2.0, 6.0, -2.0, 1.0, -3.0, 6.0, -3.0, 9.0]
        );
    }

    #[test]
    fn linear_decay_rhs() {
        let m = QuadraticModel::linear(-DMatrix::identity(2, 2)).unwrap();
        assert_eq!(m.rhs(&[2.0, -3.0]).unwrap(), vec![-2.0, 3.0]);
        assert!(m.rhs(&[1.0]).is_err());
    }

    #[test]
    fn slices_and_full_matrix_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..5 {
            let a = randn(&mut rng, n, n);
            let hf = randn(&mut rng, n, n * n);
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let m = QuadraticModel::from_h_full(a.clone(), &hf, Some(b.clone())).unwrap();
            assert_eq!(m.h_full(), hf);
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let zk = DVector::from_vec(kron_self(&z));
            let zv = DVector::from_column_slice(&z);
            let direct = &a * &zv + &hf * zk + b;
            let got = m.rhs(&z).unwrap();
            for i in 0..n {
                assert!((direct[i] - got[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn realize_identity_damping() {
        let n = 3;
        let p = StableParams::new(
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            vec![DMatrix::zeros(n, n); n],
        )
        .unwrap();
        let m = realize_stable(&p);
        assert_eq!(m.a(), &(-DMatrix::identity(n, n)));
        assert!(m.h_slices().iter().all(|h| h.amax() == 0.0));
        assert!(m.b().is_none());
    }

    #[test]
    fn skew_linear_part_conserves_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let p = StableParams::new(
            randn(&mut rng, n, n),
            DMatrix::zeros(n, n),
            (0..n).map(|_| randn(&mut rng, n, n)).collect(),
        )
        .unwrap();
        let m = p.realize();
        for _ in 0..50 {
            let z = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            assert!((z.transpose() * m.a() * &z)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_part_matches_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..6 {
            let p = StableParams::new(
                randn(&mut rng, n, n),
                randn(&mut rng, n, n),
                (0..n).map(|_| randn(&mut rng, n, n)).collect(),
            )
            .unwrap();
            let m = p.realize();
            let sym = m.a() + m.a().transpose();
            let expected = -2.0 * &p.l_raw * p.l_raw.transpose();
            assert!((&sym - expected).amax() < 1e-12);
            let eig = sym.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e <= 1e-12));
            check_stable_structure(&m, 1e-12).unwrap();
        }
    }

    #[test]
    fn energy_rate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        // A = -I with skew H: rate = -|z|^2.
        let p = StableParams::new(
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            (0..n).map(|_| randn(&mut rng, n, n)).collect(),
        )
        .unwrap();
        let m = p.realize();
        let z = [0.4, -1.2, 2.0];
        let e = energy_rate(&m, &z).unwrap();
        let norm2: f64 = z.iter().map(|v| v * v).sum();
        assert!((e + norm2).abs() < 1e-12);

        let with_b = QuadraticModel::zeros(n, true);
        assert!(matches!(energy_rate(&with_b, &z), Err(Error::Contract(_))));
    }

    #[test]
    fn energy_rate_zero_without_dissipation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4;
        let p = StableParams::new(
            randn(&mut rng, n, n),
            DMatrix::zeros(n, n),
            (0..n).map(|_| randn(&mut rng, n, n)).collect(),
        )
        .unwrap();
        let m = p.realize();
        for _ in 0..1000 {
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let norm2: f64 = z.iter().map(|v| v * v).sum();
            assert!(energy_rate(&m, &z).unwrap().abs() < 1e-12 * norm2.max(1.0) * 10.0);
        }
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = StableParams::init(3, &mut rng);
        let rec = ModelRecord::from_stable(&p);
        let json = serde_json::to_string(&rec).unwrap();
        let back: ModelRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.stable_params().unwrap().unwrap(), p);

        let m = QuadraticModel::from_h_full(
            randn(&mut rng, 2, 2),
            &randn(&mut rng, 2, 4),
            Some(DVector::from_vec(vec![0.5, -0.5])),
        )
        .unwrap();
        let rec = ModelRecord::from_model(&m);
        let back: ModelRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(back.model().unwrap(), m);
    }

    #[test]
    fn init_fallback_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = StableParams::init(4, &mut rng);
        assert!(p.j_raw.amax() < 0.01);
        assert!(p.h_raw.iter().all(|h| h.amax() < 0.01));
        assert_eq!(p.l_raw, DMatrix::identity(4, 4) * 0.1);
    }
}
