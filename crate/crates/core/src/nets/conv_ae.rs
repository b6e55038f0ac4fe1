use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{conv_out_len, conv_transpose_out_len, Graph, Var};

/// 1-D convolutional autoencoder.
///
/// Encoder: strided convolutions through `channels`, flatten, linear to the
/// latent. Decoder: optional `[z, z ⊗ z]` augmentation, linear back to the
/// flattened feature map, then transposed convolutions mirroring the encoder.
/// Hidden layers use silu; both output layers are linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAeSpec {
    pub input_len: usize,
    /// Channel schedule, starting at the single input channel.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub latent: usize,
    pub quad_aug: bool,
}

impl Default for ConvAeSpec {
    fn default() -> Self {
        Self {
            input_len: 256,
            channels: vec![1, 8, 16, 32, 64],
            kernel: 4,
            stride: 2,
            padding: 1,
            latent: 4,
            quad_aug: true,
        }
    }
}

impl ConvAeSpec {
    /// Spatial lengths after each encoder convolution, starting with the input.
    pub fn encoder_lengths(&self) -> Result<Vec<usize>> {
        let mut lens = vec![self.input_len];
        for _ in 1..self.channels.len() {
            let prev = *lens.last().unwrap();
            let next = conv_out_len(prev, self.kernel, self.stride, self.padding)
                .filter(|&l| l > 0)
                .ok_or_else(|| Error::Config(format!("convolution cannot shrink length {prev}")))?;
            lens.push(next);
        }
        Ok(lens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels[0] != 1 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "channel schedule {:?} must start at 1 and have at least one layer",
                self.channels
            )));
        }
        if self.latent == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let lens = self.encoder_lengths()?;
        let mut len = *lens.last().unwrap();
        for _ in 1..self.channels.len() {
            len = conv_transpose_out_len(len, self.kernel, self.stride, self.padding)
                .ok_or_else(|| Error::Config("transposed convolution has empty output".into()))?;
        }
        if len != self.input_len {
            return Err(Error::Config(format!(
                "decoder reconstructs length {len}, input has {}",
                self.input_len
            )));
        }
        Ok(())
    }

    pub fn flat_len(&self) -> Result<usize> {
        Ok(self.channels.last().unwrap() * self.encoder_lengths()?.last().unwrap())
    }

    pub fn decoder_input(&self) -> usize {
        if self.quad_aug {
            self.latent + self.latent * self.latent
        } else {
            self.latent
        }
    }

    fn conv_layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn init_encoder<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new();
        for l in 0..self.conv_layers() {
            let (ci, co) = (self.channels[l], self.channels[l + 1]);
            let bound = 1.0 / ((ci * self.kernel) as f64).sqrt();
            s.push_uniform(format!("conv{l}.weight"), vec![co, ci, self.kernel], bound, rng);
            s.push_uniform(format!("conv{l}.bias"), vec![co], bound, rng);
        }
        let flat = self.flat_len()?;
        let bound = 1.0 / (flat as f64).sqrt();
        s.push_uniform("fc.weight", vec![flat, self.latent], bound, rng);
        s.push_uniform("fc.bias", vec![self.latent], bound, rng);
        Ok(s)
    }

    pub fn init_decoder<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new();
        let (din, flat) = (self.decoder_input(), self.flat_len()?);
        let bound = 1.0 / (din as f64).sqrt();
        s.push_uniform("fc.weight", vec![din, flat], bound, rng);
        s.push_uniform("fc.bias", vec![flat], bound, rng);
        let rev: Vec<usize> = self.channels.iter().rev().copied().collect();
        for l in 0..self.conv_layers() {
            let (ci, co) = (rev[l], rev[l + 1]);
            let bound = 1.0 / ((co * self.kernel) as f64).sqrt();
            s.push_uniform(format!("deconv{l}.weight"), vec![ci, co, self.kernel], bound, rng);
            s.push_uniform(format!("deconv{l}.bias"), vec![co], bound, rng);
        }
        Ok(s)
    }

    fn check(&self, g: &Graph, x: Var, width: usize, op: &'static str) -> Result<usize> {
        match g.shape(x) {
            [b, d] if *d == width => Ok(*b),
            s => Err(dim_err(op, format!("input {:?}, expected [B, {width}]", s))),
        }
    }

    /// `x: [B, L] -> z: [B, latent]`; with a tangent also returns `dz`.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        tangent: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let batch = self.check(g, x, self.input_len, "conv_encoder")?;
        let mut a = g.reshape(x, vec![batch, 1, self.input_len])?;
        let mut t = match tangent {
            Some(t) => Some(g.reshape(t, vec![batch, 1, self.input_len])?),
            None => None,
        };
        for l in 0..self.conv_layers() {
            let (w, b) = (p[2 * l], p[2 * l + 1]);
            let h = g.conv1d(a, w, Some(b), self.stride, self.padding)?;
            a = g.silu(h);
            if let Some(tv) = t {
                let th = g.conv1d(tv, w, None, self.stride, self.padding)?;
                let slope = g.silu_deriv(h);
                t = Some(g.mul(slope, th)?);
            }
        }
        let flat = self.flat_len()?;
        let k = 2 * self.conv_layers();
        let a = g.reshape(a, vec![batch, flat])?;
        let z = g.matmul(a, p[k])?;
        let z = g.add(z, p[k + 1])?;
        let tz = match t {
            Some(tv) => {
                let tv = g.reshape(tv, vec![batch, flat])?;
                Some(g.matmul(tv, p[k])?)
            }
            None => None,
        };
        Ok((z, tz))
    }

    /// `z: [B, latent] -> x̂: [B, L]`; with a tangent also returns `dx̂`.
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &[Var],
        z: Var,
        tangent: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let batch = self.check(g, z, self.latent, "conv_decoder")?;
        let (mut a, mut t) = if self.quad_aug {
            let aug = super::quad_aug(g, z)?;
            let taug = match tangent {
                Some(tv) => Some(super::quad_aug_tangent(g, z, tv)?),
                None => None,
            };
            (aug, taug)
        } else {
            (z, tangent)
        };
        let lens = self.encoder_lengths()?;
        let c_last = *self.channels.last().unwrap();
        let l_last = *lens.last().unwrap();
        let h = g.matmul(a, p[0])?;
        let h = g.add(h, p[1])?;
        a = g.silu(h);
        a = g.reshape(a, vec![batch, c_last, l_last])?;
        if let Some(tv) = t {
            let th = g.matmul(tv, p[0])?;
            let slope = g.silu_deriv(h);
            let ta = g.mul(slope, th)?;
            t = Some(g.reshape(ta, vec![batch, c_last, l_last])?);
        }
        let layers = self.conv_layers();
        for l in 0..layers {
            let (w, b) = (p[2 + 2 * l], p[3 + 2 * l]);
            let h = g.conv_transpose1d(a, w, Some(b), self.stride, self.padding)?;
            let th = match t {
                Some(tv) => Some(g.conv_transpose1d(tv, w, None, self.stride, self.padding)?),
                None => None,
            };
            if l + 1 == layers {
                a = h;
                t = th;
            } else {
                a = g.silu(h);
                if let Some(th) = th {
                    let slope = g.silu_deriv(h);
                    t = Some(g.mul(slope, th)?);
                }
            }
        }
        let out = g.reshape(a, vec![batch, self.input_len])?;
        let tout = match t {
            Some(tv) => Some(g.reshape(tv, vec![batch, self.input_len])?),
            None => None,
        };
        Ok((out, tout))
    }
}
