use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Var};

/// Fully connected network with silu hidden layers and a linear output layer.
///
/// The first hidden layer maps `input -> width`; each further hidden layer maps
/// `width -> width` and, with `skip`, adds its input to its activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub output: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub skip: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 {
            return Err(Error::Config("network input and output sizes must be positive".into()));
        }
        if self.hidden_layers > 0 && self.width == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.hidden_layers == 0 {
            return vec![(self.input, self.output)];
        }
        let mut dims = vec![(self.input, self.width)];
        dims.extend(std::iter::repeat_n((self.width, self.width), self.hidden_layers - 1));
        dims.push((self.width, self.output));
        dims
    }

    /// Weights are stored `[fan_in, fan_out]`; both weights and biases start
    /// from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for (l, (fi, fo)) in self.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fi as f64).sqrt();
            store.push_uniform(format!("layer{l}.weight"), vec![fi, fo], bound, rng);
            store.push_uniform(format!("layer{l}.bias"), vec![fo], bound, rng);
        }
        store
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        match g.shape(x) {
            [_, d] if *d == self.input => Ok(()),
            s => Err(dim_err("mlp_forward", format!("input {:?}, expected [B, {}]", s, self.input))),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let layers = self.layer_dims().len();
        let mut a = x;
        for l in 0..layers {
            let h = g.matmul(a, params[2 * l])?;
            let h = g.add(h, params[2 * l + 1])?;
            a = if l + 1 == layers {
                h
            } else {
                let act = g.silu(h);
                if self.skip && l > 0 {
                    g.add(act, a)?
                } else {
                    act
                }
            };
        }
        Ok(a)
    }

    /// Output together with its directional derivative along `tangent`
    /// (same shape as `x`), propagated layer by layer.
    pub fn forward_tangent(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        tangent: Var,
    ) -> Result<(Var, Var)> {
        self.check_input(g, x)?;
        if g.shape(tangent) != g.shape(x) {
            return Err(dim_err("mlp_tangent", "tangent shape differs from input"));
        }
        let layers = self.layer_dims().len();
        let (mut a, mut t) = (x, tangent);
        for l in 0..layers {
            let w = params[2 * l];
            let h = g.matmul(a, w)?;
            let h = g.add(h, params[2 * l + 1])?;
            let th = g.matmul(t, w)?;
            if l + 1 == layers {
                a = h;
                t = th;
            } else {
                let act = g.silu(h);
                let slope = g.silu_deriv(h);
                let tact = g.mul(slope, th)?;
                if self.skip && l > 0 {
                    a = g.add(act, a)?;
                    t = g.add(tact, t)?;
                } else {
                    a = act;
                    t = tact;
                }
            }
        }
        Ok((a, t))
    }
}
