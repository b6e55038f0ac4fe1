//! The three-term embedding loss.

use serde::{Deserialize, Serialize};

use super::latent::LatentModel;
use crate::error::{dim_err, Result};
use crate::nets::{AeVars, Autoencoder};
use crate::tensor::{Graph, Tensor, Var};

/// `0.5 ‖v‖₂ + 0.5 ‖v‖₁`.
pub fn mixed_norm(v: &[f64]) -> f64 {
    let l2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let l1 = v.iter().map(|x| x.abs()).sum::<f64>();
    0.5 * l2 + 0.5 * l1
}

/// Batch mean of the per-row mixed norm of `r: [B, d]`.
pub fn mixed_norm_rows(g: &mut Graph, r: Var) -> Result<Var> {
    let sq = g.square(r);
    let ss = g.sum_last(sq)?;
    let l2 = g.sqrt(ss)?;
    let ab = g.abs(r);
    let l1 = g.sum_last(ab)?;
    let both = g.add(l2, l1)?;
    let half = g.scale(both, 0.5);
    Ok(g.mean(half))
}

/// Weights `(λ₁, λ₂, λ₃)` of reconstruction, decoder-derivative and
/// encoder-derivative terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub x_from_z: f64,
    pub z_from_x: f64,
}

impl LossWeights {
    pub fn new(recon: f64, x_from_z: f64, z_from_x: f64) -> Self {
        Self {
            recon,
            x_from_z,
            z_from_x,
        }
    }

    /// `λ₁ L_recon + λ₂ L_ẋ + λ₃ L_ż`; a zero-weighted term is ignored even if absent.
    pub fn combine(&self, terms: &LossValues) -> f64 {
        let mut total = self.recon * terms.recon + self.z_from_x * terms.z_from_x;
        if self.x_from_z != 0.0 {
            total += self.x_from_z * terms.x_from_z.unwrap_or(f64::NAN);
        }
        total
    }
}

/// Values of the individual loss terms; the decoder-derivative term is
/// `None` when it was skipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub recon: f64,
    pub x_from_z: Option<f64>,
    pub z_from_x: f64,
}

/// Graph handles of a built loss.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub recon: Var,
    pub x_from_z: Option<Var>,
    pub z_from_x: Var,
}

impl LossGraph {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            recon: g.value(self.recon).data()[0],
            x_from_z: self.x_from_z.map(|v| g.value(v).data()[0]),
            z_from_x: g.value(self.z_from_x).data()[0],
        }
    }
}

/// Builds the total loss for states `x` and derivatives `xdot`, both `[B, d]`.
///
/// * reconstruction: `x - Φ(Ψ(x))`
/// * encoder derivative: `∇Ψ(x) ẋ - f(Ψ(x))`
/// * decoder derivative: `ẋ - ∇Φ(z) f(z)`, skipped when its weight is zero
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    g: &mut Graph,
    ae: &Autoencoder,
    ae_vars: &AeVars,
    latent: &LatentModel,
    latent_vars: &[Var],
    x: Var,
    xdot: Var,
    w: &LossWeights,
) -> Result<LossGraph> {
    if g.shape(x) != g.shape(xdot) {
        return Err(dim_err(
            "loss",
            format!("states {:?} and derivatives {:?}", g.shape(x), g.shape(xdot)),
        ));
    }
    let (z, zdot_enc) = ae.encode(g, ae_vars, x, Some(xdot))?;
    let f = latent.rhs(g, latent_vars, z)?;
    let r_z = g.sub(zdot_enc.expect("tangent requested"), f)?;
    let z_from_x = mixed_norm_rows(g, r_z)?;

    let with_dec = w.x_from_z != 0.0;
    let (xhat, xdot_dec) = ae.decode(g, ae_vars, z, with_dec.then_some(f))?;
    let r_x = g.sub(x, xhat)?;
    let recon = mixed_norm_rows(g, r_x)?;

    let a = g.scale(recon, w.recon);
    let b = g.scale(z_from_x, w.z_from_x);
    let mut total = g.add(a, b)?;
    let x_from_z = match xdot_dec {
        Some(xd) => {
            let r = g.sub(xdot, xd)?;
            let term = mixed_norm_rows(g, r)?;
            let c = g.scale(term, w.x_from_z);
            total = g.add(total, c)?;
            Some(term)
        }
        None => None,
    };
    Ok(LossGraph {
        total,
        recon,
        x_from_z,
        z_from_x,
    })
}

/// Evaluates the loss terms on row-major data without tracking gradients.
pub fn evaluate_loss(
    ae: &Autoencoder,
    latent: &LatentModel,
    x: &[f64],
    xdot: &[f64],
    w: &LossWeights,
) -> Result<LossValues> {
    let d = ae.state_dim();
    let rows = x.len() / d;
    let mut g = Graph::new();
    let ae_vars = ae.bind(&mut g, false);
    let lv = latent.bind(&mut g, false);
    let xv = g.constant(Tensor::new(vec![rows, d], x.to_vec())?);
    let xd = g.constant(Tensor::new(vec![rows, d], xdot.to_vec())?);
    let loss = build_loss(&mut g, ae, &ae_vars, latent, &lv, xv, xd, w)?;
    Ok(loss.values(&g))
}
