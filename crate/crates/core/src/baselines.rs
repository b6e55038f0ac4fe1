//! Comparison methods: operator inference in given coordinates, POD-projected
//! variants, and linear latent embeddings.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::qdyn::{kron_self, ModelRecord, QuadraticModel};
use crate::systems::TrajectoryDataset;
use crate::train::{fit_embedding, FitOptions, LatentForm, TrainConfig, TrainOutcome};

/// How the quadratic features enter the regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KronColumns {
    /// One column per unordered pair `zᵢ z_j`, `i ≤ j`.
    Merged,
    /// All `n²` products, duplicates included.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpInfOptions {
    /// Tikhonov weight relative to the trace of the Gram matrix.
    pub ridge_rel: f64,
    pub bias: bool,
    pub kron: KronColumns,
}

impl Default for OpInfOptions {
    fn default() -> Self {
        Self {
            ridge_rel: 1e-10,
            bias: true,
            kron: KronColumns::Merged,
        }
    }
}

/// Index pairs `(i, j)`, `i ≤ j`, in merged-column order.
fn unique_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

/// Solves `min ‖D X − Y‖² + μ‖X‖²` with `μ = ridge_rel · tr(DᵀD)` through the
/// SVD of `D`. Singular values below `1e-12 · s_max` are dropped, so with a
/// zero ridge this is the minimum-norm solution. Returns the solution and
/// whether `D` was numerically rank deficient.
pub fn ridge_lstsq(d: &DMatrix<f64>, y: &DMatrix<f64>, ridge_rel: f64) -> Result<(DMatrix<f64>, bool)> {
    if d.nrows() != y.nrows() {
        return Err(dim_err(
            "ridge_lstsq",
            format!("design has {} rows, targets {}", d.nrows(), y.nrows()),
        ));
    }
    if d.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite regression data".into()));
    }
    let svd = d.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let mu = ridge_rel * s.iter().map(|v| v * v).sum::<f64>();
    let cutoff = 1e-12 * s_max;
    let uty = u.transpose() * y;
    let mut scaled = DMatrix::zeros(s.len(), y.ncols());
    let mut deficient = s.len() < d.ncols();
    for k in 0..s.len() {
        if s[k] <= cutoff || s[k] == 0.0 {
            deficient = true;
            continue;
        }
        let f = s[k] / (s[k] * s[k] + mu);
        for c in 0..y.ncols() {
            scaled[(k, c)] = f * uty[(k, c)];
        }
    }
    Ok((vt.transpose() * scaled, deficient))
}

fn design_matrix(states: &[f64], n: usize, opts: &OpInfOptions) -> DMatrix<f64> {
    let rows = states.len() / n;
    let pairs = unique_pairs(n);
    let quad = match opts.kron {
        KronColumns::Merged => pairs.len(),
        KronColumns::Full => n * n,
    };
    let p = n + quad + usize::from(opts.bias);
    let mut d = DMatrix::zeros(rows, p);
    for (r, z) in states.chunks(n).enumerate() {
        for c in 0..n {
            d[(r, c)] = z[c];
        }
        match opts.kron {
            KronColumns::Merged => {
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    d[(r, n + k)] = z[i] * z[j];
                }
            }
            KronColumns::Full => {
                for (k, v) in kron_self(z).into_iter().enumerate() {
                    d[(r, n + k)] = v;
                }
            }
        }
        if opts.bias {
            d[(r, p - 1)] = 1.0;
        }
    }
    d
}

/// Least-squares fit of `ẋ ≈ A x + H (x ⊗ x) + B` to row-major pairs.
/// Merged pair coefficients are split evenly between `H_i[:, j]` and `H_j[:, i]`.
pub fn fit_quad_opinf_rows(
    states: &[f64],
    derivs: &[f64],
    n: usize,
    opts: &OpInfOptions,
) -> Result<QuadraticModel> {
    if n == 0 || !states.len().is_multiple_of(n) || states.len() != derivs.len() || states.is_empty() {
        return Err(dim_err(
            "fit_quad_opinf",
            format!("{} state and {} derivative values for dimension {n}", states.len(), derivs.len()),
        ));
    }
    let d = design_matrix(states, n, opts);
    let y = DMatrix::from_row_slice(states.len() / n, n, derivs);
    let (x, deficient) = ridge_lstsq(&d, &y, opts.ridge_rel)?;
    if deficient && opts.kron == KronColumns::Merged {
        log::warn!("operator inference regression is rank deficient; using the regularized minimum-norm solution");
    }
    // x is p × n; column r holds the coefficients of ż_r.
    let a = x.rows(0, n).transpose();
    let mut h_full = DMatrix::zeros(n, n * n);
    match opts.kron {
        KronColumns::Merged => {
            for (k, &(i, j)) in unique_pairs(n).iter().enumerate() {
                for r in 0..n {
                    let c = x[(n + k, r)];
                    if i == j {
                        h_full[(r, i * n + i)] = c;
                    } else {
                        h_full[(r, i * n + j)] = 0.5 * c;
                        h_full[(r, j * n + i)] = 0.5 * c;
                    }
                }
            }
        }
        KronColumns::Full => {
            for k in 0..n * n {
                for r in 0..n {
                    h_full[(r, k)] = x[(n + k, r)];
                }
            }
        }
    }
    let b = opts
        .bias
        .then(|| DVector::from_iterator(n, (0..n).map(|r| x[(x.nrows() - 1, r)])));
    QuadraticModel::from_h_full(a, &h_full, b)
}

/// Quadratic operator inference in the dataset's own coordinates.
pub fn fit_quad_opinf(dataset: &TrajectoryDataset) -> Result<QuadraticModel> {
    fit_quad_opinf_rows(
        dataset.states(),
        dataset.derivs(),
        dataset.dim(),
        &OpInfOptions::default(),
    )
}

/// Symmetrizes each quadratic form so that `H_i[:, j] = H_j[:, i]`; models
/// that differ only by this symmetry give identical right-hand sides.
pub fn canonical_h_full(model: &QuadraticModel) -> DMatrix<f64> {
    let n = model.dim();
    let h = model.h_full();
    let mut out = h.clone();
    for r in 0..n {
        for i in 0..n {
            for j in 0..n {
                out[(r, i * n + j)] = 0.5 * (h[(r, i * n + j)] + h[(r, j * n + i)]);
            }
        }
    }
    out
}

/// Dominant left singular vectors of the snapshot matrix (no centering).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PodBasis {
    pub state_dim: usize,
    pub rank: usize,
    /// `state_dim × rank`, row-major.
    pub modes: Vec<f64>,
    /// All singular values of the snapshot matrix, descending.
    pub singular_values: Vec<f64>,
}

impl PodBasis {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.state_dim, self.rank, &self.modes)
    }

    /// `z = Vᵀ x` for each row of `x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.state_dim;
        if !x.len().is_multiple_of(d) {
            return Err(dim_err("pod_project", format!("{} values for state dimension {d}", x.len())));
        }
        let mut z = Vec::with_capacity(x.len() / d * self.rank);
        for row in x.chunks(d) {
            for k in 0..self.rank {
                z.push((0..d).map(|i| self.modes[i * self.rank + k] * row[i]).sum());
            }
        }
        Ok(z)
    }

    /// `x = V z` for each row of `z`.
    pub fn lift(&self, z: &[f64]) -> Result<Vec<f64>> {
        let r = self.rank;
        if !z.len().is_multiple_of(r) {
            return Err(dim_err("pod_lift", format!("{} values for rank {r}", z.len())));
        }
        let mut x = Vec::with_capacity(z.len() / r * self.state_dim);
        for row in z.chunks(r) {
            for i in 0..self.state_dim {
                x.push((0..r).map(|k| self.modes[i * r + k] * row[k]).sum());
            }
        }
        Ok(x)
    }

    /// Relative Frobenius error of projecting the snapshots onto the first
    /// `rank` modes, from the singular values alone.
    pub fn truncation_error(&self) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        let tail: f64 = self.singular_values[self.rank..].iter().map(|s| s * s).sum();
        (tail / total).sqrt()
    }
}

/// POD basis of row-major snapshots (`rows × state_dim`). Each mode's
/// largest-magnitude entry is made positive.
pub fn pod_basis(snapshots: &[f64], state_dim: usize, r: usize) -> Result<PodBasis> {
    if state_dim == 0 || snapshots.is_empty() || !snapshots.len().is_multiple_of(state_dim) {
        return Err(dim_err("pod_basis", format!("{} values for state dimension {state_dim}", snapshots.len())));
    }
    let rows = snapshots.len() / state_dim;
    if r == 0 || r > rows.min(state_dim) {
        return Err(Error::Contract(format!(
            "rank {r} outside 1..={} for {rows} snapshots of dimension {state_dim}",
            rows.min(state_dim)
        )));
    }
    let xt = DMatrix::from_row_slice(rows, state_dim, snapshots);
    let svd = xt.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let mut modes = vec![0.0; state_dim * r];
    for (c, &k) in order.iter().take(r).enumerate() {
        let row = vt.row(k);
        let pivot = row.iter().cloned().fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..state_dim {
            modes[i * r + c] = sign * row[i];
        }
    }
    Ok(PodBasis {
        state_dim,
        rank: r,
        modes,
        singular_values,
    })
}

/// POD projection followed by quadratic operator inference in the reduced
/// coordinates; reconstruction is `V z`.
pub fn fit_linproj_qopinf(dataset: &TrajectoryDataset, r: usize) -> Result<(PodBasis, QuadraticModel)> {
    let pod = pod_basis(dataset.states(), dataset.dim(), r)?;
    let z = pod.project(dataset.states())?;
    let zd = pod.project(dataset.derivs())?;
    let model = fit_quad_opinf_rows(&z, &zd, r, &OpInfOptions::default())?;
    Ok((pod, model))
}

/// Reconstruction `x ≈ V z + W (z ⊗ z)` with `z = Vᵀ x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadManifold {
    pub basis: PodBasis,
    /// `state_dim × rank²`, row-major.
    pub w: Vec<f64>,
}

impl QuadManifold {
    pub fn w_matrix(&self) -> DMatrix<f64> {
        let r = self.basis.rank;
        DMatrix::from_row_slice(self.basis.state_dim, r * r, &self.w)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.basis.project(x)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let r = self.basis.rank;
        let mut x = self.basis.lift(z)?;
        let d = self.basis.state_dim;
        for (row, zr) in x.chunks_mut(d).zip(z.chunks(r)) {
            let k = kron_self(zr);
            for i in 0..d {
                row[i] += self.w[i * r * r..(i + 1) * r * r]
                    .iter()
                    .zip(&k)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        Ok(x)
    }
}

/// Fits `W` of a quadratic manifold on the POD residual of the snapshots.
/// The result is symmetric under swapping the two factors of `z ⊗ z`.
pub fn fit_quad_manifold(snapshots: &[f64], state_dim: usize, r: usize, ridge_rel: f64) -> Result<QuadManifold> {
    let basis = pod_basis(snapshots, state_dim, r)?;
    let z = basis.project(snapshots)?;
    let lin = basis.lift(&z)?;
    let rows = snapshots.len() / state_dim;
    let residual = DMatrix::from_row_slice(
        rows,
        state_dim,
        &snapshots.iter().zip(&lin).map(|(a, b)| a - b).collect::<Vec<_>>(),
    );
    let pairs = unique_pairs(r);
    let mut k = DMatrix::zeros(rows, pairs.len());
    for (row, zr) in z.chunks(r).enumerate() {
        for (c, &(i, j)) in pairs.iter().enumerate() {
            k[(row, c)] = zr[i] * zr[j];
        }
    }
    let (coef, _) = ridge_lstsq(&k, &residual, ridge_rel)?;
    let mut w = vec![0.0; state_dim * r * r];
    for (c, &(i, j)) in pairs.iter().enumerate() {
        for s in 0..state_dim {
            let v = coef[(c, s)];
            if i == j {
                w[s * r * r + i * r + i] = v;
            } else {
                w[s * r * r + i * r + j] = 0.5 * v;
                w[s * r * r + j * r + i] = 0.5 * v;
            }
        }
    }
    Ok(QuadManifold { basis, w })
}

/// Quadratic-manifold reconstruction with quadratic operator inference on
/// the POD coordinates.
pub fn fit_quadproj_qopinf(dataset: &TrajectoryDataset, r: usize) -> Result<(QuadManifold, QuadraticModel)> {
    let manifold = fit_quad_manifold(dataset.states(), dataset.dim(), r, 1e-10)?;
    let z = manifold.encode(dataset.states())?;
    let zd = manifold.basis.project(dataset.derivs())?;
    let model = fit_quad_opinf_rows(&z, &zd, r, &OpInfOptions::default())?;
    Ok((manifold, model))
}

/// Autoencoder with linear latent dynamics `ż = A z`, trained exactly like
/// the quadratic embedding.
pub fn fit_linear_embeds(
    dataset: &TrajectoryDataset,
    cfg: &TrainConfig,
    opts: FitOptions<'_>,
) -> Result<TrainOutcome> {
    fit_embedding(dataset, cfg, LatentForm::Linear, opts)
}

/// Serialized regression baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum BaselineArtifact {
    QuadOpinf {
        model: ModelRecord,
    },
    LinprojQopinf {
        basis: PodBasis,
        model: ModelRecord,
    },
    QuadprojQopinf {
        manifold: QuadManifold,
        model: ModelRecord,
    },
}
