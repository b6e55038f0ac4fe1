//! Trainable latent dynamics: quadratic or linear, stable-by-construction or
//! unconstrained, with optional pruning masks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nets::ParamStore;
use crate::qdyn::{from_row_major, row_major, ModelRecord, QuadraticModel, StableParams};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentForm {
    /// `ż = A z + H (z ⊗ z) (+ B)`
    Quadratic,
    /// `ż = A z`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub dim: usize,
    pub form: LatentForm,
    /// Parameterize `A = J - R`, skew `H_i`, no constant term.
    pub stable: bool,
    /// Constant term; only for unconstrained quadratic models.
    pub bias: bool,
    /// `ε` in `R = L Lᵀ + ε I`.
    pub ridge: f64,
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if self.bias && (self.stable || self.form == LatentForm::Linear) {
            return Err(Error::Config(
                "a constant term is only available for unconstrained quadratic models".into(),
            ));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be non-negative".into()));
        }
        Ok(())
    }

    fn quadratic(&self) -> bool {
        self.form == LatentForm::Quadratic
    }
}

/// Latent model parameters plus optional keep-masks (1 keeps, 0 prunes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub spec: LatentSpec,
    pub params: ParamStore,
    pub masks: Vec<Option<Vec<f64>>>,
}

fn dmatrix_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::matrix(m.nrows(), m.ncols(), row_major(m)).expect("consistent shape")
}

impl LatentModel {
    /// Stable mode starts from `J_raw, H_raw ~ U(-0.01, 0.01)`, `L_raw = 0.1 I`;
    /// unconstrained operators start from `U(-0.01, 0.01)`.
    pub fn init<R: Rng + ?Sized>(spec: LatentSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let n = spec.dim;
        let mut params = ParamStore::new();
        if spec.stable {
            let p = StableParams::init(n, rng);
            params.push("j_raw", dmatrix_tensor(&p.j_raw));
            params.push("l_raw", dmatrix_tensor(&p.l_raw));
            if spec.quadratic() {
                let data = p.h_raw.iter().flat_map(row_major).collect();
                params.push("h_raw", Tensor::new(vec![n, n, n], data)?);
            }
        } else {
            params.push_uniform("a", vec![n, n], 0.01, rng);
            if spec.quadratic() {
                params.push_uniform("h", vec![n, n * n], 0.01, rng);
            }
            if spec.bias {
                params.push_uniform("b", vec![n], 0.01, rng);
            }
        }
        let masks = vec![None; params.len()];
        Ok(Self {
            spec,
            params,
            masks,
        })
    }

    /// Unconstrained model holding the operators of `model`.
    pub fn from_model(model: &QuadraticModel) -> Self {
        let n = model.dim();
        let mut params = ParamStore::new();
        params.push("a", dmatrix_tensor(model.a()));
        params.push("h", dmatrix_tensor(&model.h_full()));
        if let Some(b) = model.b() {
            params.push("b", Tensor::from_vec(b.as_slice().to_vec()));
        }
        let spec = LatentSpec {
            dim: n,
            form: LatentForm::Quadratic,
            stable: false,
            bias: model.b().is_some(),
            ridge: 0.0,
        };
        let masks = vec![None; params.len()];
        Self {
            spec,
            params,
            masks,
        }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn bind(&self, g: &mut Graph, tracked: bool) -> Vec<Var> {
        self.params.bind(g, tracked)
    }

    /// Graph nodes for `(Aᵀ, Hᵀ_full, B)` so that `ż = z Aᵀ + (z⊗z) Hᵀ + B` row-wise.
    fn operators(&self, g: &mut Graph, vars: &[Var]) -> Result<(Var, Option<Var>, Option<Var>)> {
        let n = self.spec.dim;
        if self.spec.stable {
            let (j_raw, l_raw) = (vars[0], vars[1]);
            let jt = g.transpose(j_raw)?;
            let diff = g.sub(jt, j_raw)?;
            let j_t = g.scale(diff, 0.5);
            let lt = g.transpose(l_raw)?;
            let r = g.matmul(l_raw, lt)?;
            let mut a_t = g.sub(j_t, r)?;
            if self.spec.ridge > 0.0 {
                let eye = DMatrix::<f64>::identity(n, n) * self.spec.ridge;
                let e = g.constant(dmatrix_tensor(&eye));
                a_t = g.sub(a_t, e)?;
            }
            let h_t = if self.spec.quadratic() {
                // Row (i n + j), column r of Hᵀ_full is skew(H_raw_i)[r, j].
                let (mut direct, mut swapped) = (Vec::with_capacity(n * n * n), Vec::with_capacity(n * n * n));
                for i in 0..n {
                    for j in 0..n {
                        for r in 0..n {
                            direct.push(i * n * n + r * n + j);
                            swapped.push(i * n * n + j * n + r);
                        }
                    }
                }
                let h_raw = vars[2];
                let d = g.gather(h_raw, direct, vec![n * n, n])?;
                let s = g.gather(h_raw, swapped, vec![n * n, n])?;
                let diff = g.sub(d, s)?;
                Some(g.scale(diff, 0.5))
            } else {
                None
            };
            Ok((a_t, h_t, None))
        } else {
            let a_t = g.transpose(vars[0])?;
            let mut k = 1;
            let h_t = if self.spec.quadratic() {
                k += 1;
                Some(g.transpose(vars[1])?)
            } else {
                None
            };
            let b = self.spec.bias.then(|| vars[k]);
            Ok((a_t, h_t, b))
        }
    }

    /// Latent vector field applied row-wise to `z: [B, n]`.
    pub fn rhs(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var> {
        match g.shape(z) {
            [_, d] if *d == self.spec.dim => {}
            s => return Err(dim_err("latent_rhs", format!("{:?} for latent dim {}", s, self.spec.dim))),
        }
        let (a_t, h_t, b) = self.operators(g, vars)?;
        let mut out = g.matmul(z, a_t)?;
        if let Some(h_t) = h_t {
            let k = g.kron_self(z)?;
            let q = g.matmul(k, h_t)?;
            out = g.add(out, q)?;
        }
        if let Some(b) = b {
            out = g.add(out, b)?;
        }
        Ok(out)
    }

    fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("latent parameter '{name}' missing")))?;
        let (r, c) = (t.shape()[0], t.numel() / t.shape()[0]);
        Ok(DMatrix::from_row_slice(r, c, t.data()))
    }

    pub fn stable_params(&self) -> Result<Option<StableParams>> {
        if !self.spec.stable {
            return Ok(None);
        }
        let n = self.spec.dim;
        let h_raw = match self.params.get("h_raw") {
            Some(t) => t
                .data()
                .chunks(n * n)
                .map(|c| from_row_major(n, c))
                .collect::<Result<Vec<_>>>()?,
            None => vec![DMatrix::zeros(n, n); n],
        };
        let p = StableParams::new(self.matrix("j_raw")?, self.matrix("l_raw")?, h_raw)?;
        Ok(Some(p.with_ridge(self.spec.ridge)))
    }

    /// The realized operators as a [`QuadraticModel`].
    pub fn realize(&self) -> Result<QuadraticModel> {
        if let Some(p) = self.stable_params()? {
            return Ok(p.realize());
        }
        let n = self.spec.dim;
        let a = self.matrix("a")?;
        let b = if self.spec.bias {
            Some(DVector::from_column_slice(self.params.get("b").expect("bias").data()))
        } else {
            None
        };
        let h = if self.spec.quadratic() {
            self.matrix("h")?
        } else {
            DMatrix::zeros(n, n * n)
        };
        QuadraticModel::from_h_full(a, &h, b)
    }

    /// Serialized realized model, in factored form when stable.
    pub fn record(&self) -> Result<ModelRecord> {
        Ok(match self.stable_params()? {
            Some(p) => ModelRecord::from_stable(&p),
            None => ModelRecord::from_model(&self.realize()?),
        })
    }

    /// Zeroes masked entries.
    pub fn apply_masks(&mut self) {
        for (i, mask) in self.masks.iter().enumerate() {
            if let Some(mask) = mask {
                for (v, m) in self.params.tensor_mut(i).data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
        }
    }

    /// Masks quadratic entries (and off-diagonal linear entries when
    /// unconstrained) whose realized magnitude is below `threshold` times the
    /// largest realized magnitude of the same operator. Masks accumulate.
    pub fn prune(&mut self, threshold: f64) -> Result<()> {
        if !(threshold >= 0.0) {
            return Err(Error::Config(format!("pruning threshold {threshold} must be non-negative")));
        }
        let n = self.spec.dim;
        let model = self.realize()?;
        if self.spec.quadratic() {
            let hmax = model.h_slices().iter().map(|h| h.amax()).fold(0.0, f64::max);
            let cut = threshold * hmax;
            let idx = if self.spec.stable { 2 } else { 1 };
            let mut mask = self.masks[idx].clone().unwrap_or_else(|| vec![1.0; n * n * n]);
            for (i, hi) in model.h_slices().iter().enumerate() {
                for r in 0..n {
                    for j in 0..n {
                        if hi[(r, j)].abs() < cut {
                            if self.spec.stable {
                                mask[i * n * n + r * n + j] = 0.0;
                                mask[i * n * n + j * n + r] = 0.0;
                            } else {
                                mask[r * n * n + i * n + j] = 0.0;
                            }
                        }
                    }
                }
            }
            self.masks[idx] = Some(mask);
        }
        if !self.spec.stable {
            let a = model.a();
            let amax = (0..n)
                .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
                .map(|(r, c)| a[(r, c)].abs())
                .fold(0.0, f64::max);
            let mut mask = self.masks[0].clone().unwrap_or_else(|| vec![1.0; n * n]);
            for r in 0..n {
                for c in 0..n {
                    if r != c && a[(r, c)].abs() < threshold * amax {
                        mask[r * n + c] = 0.0;
                    }
                }
            }
            self.masks[0] = Some(mask);
        }
        self.apply_masks();
        Ok(())
    }
}

/// Returns a copy of `model` with every `H` entry below `threshold · max|H|`
/// set to zero; with `linear`, off-diagonal `A` entries below
/// `threshold · max|A_offdiag|` are zeroed as well.
pub fn prune_quadratic(model: &QuadraticModel, threshold: f64, linear: bool) -> Result<QuadraticModel> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("pruning threshold {threshold} must be non-negative")));
    }
    let mut out = model.clone();
    let hmax = model.h_slices().iter().map(|h| h.amax()).fold(0.0, f64::max);
    for h in out.h_slices_mut() {
        h.apply(|v| {
            if v.abs() < threshold * hmax {
                *v = 0.0
            }
        });
    }
    if linear {
        let n = model.dim();
        let a = model.a();
        let amax = (0..n)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .filter(|(r, c)| r != c)
            .map(|(r, c)| a[(r, c)].abs())
            .fold(0.0, f64::max);
        let am = out.a_mut();
        for r in 0..n {
            for c in 0..n {
                if r != c && am[(r, c)].abs() < threshold * amax {
                    am[(r, c)] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qdyn::check_stable_structure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(form: LatentForm, stable: bool, bias: bool) -> LatentSpec {
        LatentSpec {
            dim: 3,
            form,
            stable,
            bias,
            ridge: 0.0,
        }
    }

    fn graph_rhs(m: &LatentModel, z: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let zv = g.constant(Tensor::new(vec![z.len() / 3, 3], z.to_vec()).unwrap());
        let out = m.rhs(&mut g, &vars, zv).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn graph_rhs_matches_realized_model() {
        let z = [0.3, -1.1, 0.8, 2.0, 0.5, -0.2];
        for (form, stable, bias) in [
            (LatentForm::Quadratic, true, false),
            (LatentForm::Quadratic, false, true),
            (LatentForm::Quadratic, false, false),
            (LatentForm::Linear, true, false),
            (LatentForm::Linear, false, false),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut m = LatentModel::init(spec(form, stable, bias), &mut rng).unwrap();
            // larger entries than the init scale so every term matters
            m.params
                .tensors_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= 50.0));
            let model = m.realize().unwrap();
            let got = graph_rhs(&m, &z);
            for row in 0..2 {
                let expect = model.rhs(&z[row * 3..row * 3 + 3]).unwrap();
                for k in 0..3 {
                    assert!((got[row * 3 + k] - expect[k]).abs() < 1e-13, "{form:?} {stable}");
                }
            }
            if stable {
                check_stable_structure(&model, 1e-12).unwrap();
            }
        }
    }

    #[test]
    fn bias_only_for_unconstrained_quadratic() {
        assert!(spec(LatentForm::Quadratic, true, true).validate().is_err());
        assert!(spec(LatentForm::Linear, false, true).validate().is_err());
    }

    #[test]
    fn pruning_threshold_edges_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = LatentModel::init(spec(LatentForm::Quadratic, true, false), &mut rng).unwrap();

        let mut zero = base.clone();
        zero.prune(0.0).unwrap();
        assert_eq!(zero.realize().unwrap(), base.realize().unwrap());

        let mut all = base.clone();
        all.prune(1.01).unwrap();
        assert!(all.realize().unwrap().h_slices().iter().all(|h| h.amax() == 0.0));

        let mut once = base.clone();
        once.prune(0.5).unwrap();
        let mut twice = once.clone();
        twice.prune(0.5).unwrap();
        assert_eq!(once, twice);
        let realized = once.realize().unwrap();
        check_stable_structure(&realized, 1e-12).unwrap();
        let kept = realized.h_slices().iter().flat_map(|h| h.iter()).filter(|v| **v != 0.0).count();
        assert!(kept > 0 && kept < 3 * 6);
    }

    #[test]
    fn free_pruning_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = LatentModel::init(spec(LatentForm::Quadratic, false, false), &mut rng)
            .unwrap()
            .realize()
            .unwrap();
        assert_eq!(prune_quadratic(&m, 0.0, true).unwrap(), m);
        let p = prune_quadratic(&m, 1.01, true).unwrap();
        assert!(p.h_slices().iter().all(|h| h.amax() == 0.0));
        for r in 0..3 {
            assert_eq!(p.a()[(r, r)], m.a()[(r, r)]);
        }
        let once = prune_quadratic(&m, 0.4, true).unwrap();
        assert_eq!(prune_quadratic(&once, 0.4, true).unwrap(), once);
    }

    #[test]
    fn record_realizes_the_same_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stable in [true, false] {
            let m = LatentModel::init(spec(LatentForm::Quadratic, stable, false), &mut rng).unwrap();
            assert_eq!(m.record().unwrap().model().unwrap(), m.realize().unwrap());
        }
    }
}
