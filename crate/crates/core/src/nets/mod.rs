//! Encoder/decoder networks: a skip-connected MLP for low-dimensional states
//! and a 1-D convolutional autoencoder for spatial profiles.

mod conv_ae;
mod mlp;
mod params;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, Graph, Tensor, Var};

pub use conv_ae::ConvAeSpec;
pub use mlp::MlpSpec;
pub use params::ParamStore;

pub const NETS_FORMAT_VERSION: u32 = 1;

/// Rows processed per graph when evaluating networks outside training.
const EVAL_CHUNK: usize = 512;

fn kron_indices(batch: usize, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut first = Vec::with_capacity(batch * n * n);
    let mut second = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        for i in 0..n {
            for j in 0..n {
                first.push(b * n + i);
                second.push(b * n + j);
            }
        }
    }
    (first, second)
}

/// `[B, n] -> [B, n + n²]`, each row `[z, z ⊗ z]`.
pub fn quad_aug(g: &mut Graph, z: Var) -> Result<Var> {
    if g.shape(z).len() != 2 || g.shape(z)[1] == 0 {
        return Err(dim_err("quad_aug", format!("{:?}", g.shape(z))));
    }
    let k = g.kron_self(z)?;
    g.concat(z, k)
}

/// Directional derivative of [`quad_aug`] at `z` along `t`: `[t, t⊗z + z⊗t]`.
pub fn quad_aug_tangent(g: &mut Graph, z: Var, t: Var) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if g.shape(t) != shape.as_slice() || shape.len() != 2 {
        return Err(dim_err("quad_aug_tangent", format!("{:?} vs {:?}", shape, g.shape(t))));
    }
    let (b, n) = (shape[0], shape[1]);
    let (fi, se) = kron_indices(b, n);
    let out = vec![b, n * n];
    let zi = g.gather(z, fi.clone(), out.clone())?;
    let tj = g.gather(t, se.clone(), out.clone())?;
    let ti = g.gather(t, fi, out.clone())?;
    let zj = g.gather(z, se, out)?;
    let left = g.mul(ti, zj)?;
    let right = g.mul(zi, tj)?;
    let tk = g.add(left, right)?;
    g.concat(t, tk)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AutoencoderSpec {
    Mlp { encoder: MlpSpec, decoder: MlpSpec },
    Conv(ConvAeSpec),
}

impl AutoencoderSpec {
    /// Symmetric MLP autoencoder with skip connections.
    pub fn mlp(state_dim: usize, latent: usize, width: usize, hidden_layers: usize) -> Self {
        let enc = MlpSpec {
            input: state_dim,
            output: latent,
            width,
            hidden_layers,
            skip: true,
        };
        let dec = MlpSpec {
            input: latent,
            output: state_dim,
            ..enc
        };
        AutoencoderSpec::Mlp {
            encoder: enc,
            decoder: dec,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            AutoencoderSpec::Mlp { encoder, .. } => encoder.input,
            AutoencoderSpec::Conv(c) => c.input_len,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            AutoencoderSpec::Mlp { encoder, .. } => encoder.output,
            AutoencoderSpec::Conv(c) => c.latent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AutoencoderSpec::Mlp { encoder, decoder } => {
                encoder.validate()?;
                decoder.validate()?;
                if encoder.output != decoder.input || encoder.input != decoder.output {
                    return Err(Error::Config(format!(
                        "encoder {}->{} and decoder {}->{} do not compose",
                        encoder.input, encoder.output, decoder.input, decoder.output
                    )));
                }
                Ok(())
            }
            AutoencoderSpec::Conv(c) => c.validate(),
        }
    }
}

/// Graph handles of the encoder and decoder parameters.
#[derive(Clone, Debug)]
pub struct AeVars {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub spec: AutoencoderSpec,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
}

/// Versioned serialized form of an [`Autoencoder`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderRecord {
    pub version: u32,
    #[serde(flatten)]
    pub autoencoder: Autoencoder,
}

impl Autoencoder {
    pub fn init<R: Rng + ?Sized>(spec: AutoencoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (encoder, decoder) = match &spec {
            AutoencoderSpec::Mlp { encoder, decoder } => (encoder.init(rng), decoder.init(rng)),
            AutoencoderSpec::Conv(c) => (c.init_encoder(rng)?, c.init_decoder(rng)?),
        };
        Ok(Self {
            spec,
            encoder,
            decoder,
        })
    }

    /// Assembles an autoencoder from stored parameters, checking their layout.
    pub fn from_parts(spec: AutoencoderSpec, encoder: ParamStore, decoder: ParamStore) -> Result<Self> {
        let reference = Self::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        reference.encoder.check_layout(&encoder)?;
        reference.decoder.check_layout(&decoder)?;
        Ok(Self {
            spec,
            encoder,
            decoder,
        })
    }

    pub fn to_record(&self) -> AutoencoderRecord {
        AutoencoderRecord {
            version: NETS_FORMAT_VERSION,
            autoencoder: self.clone(),
        }
    }

    pub fn from_record(rec: AutoencoderRecord) -> Result<Self> {
        if rec.version != NETS_FORMAT_VERSION {
            return Err(Error::Contract(format!(
                "network format version {} is not supported (expected {NETS_FORMAT_VERSION})",
                rec.version
            )));
        }
        let a = rec.autoencoder;
        Self::from_parts(a.spec, a.encoder, a.decoder)
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn numel(&self) -> usize {
        self.encoder.numel() + self.decoder.numel()
    }

    pub fn bind(&self, g: &mut Graph, tracked: bool) -> AeVars {
        AeVars {
            encoder: self.encoder.bind(g, tracked),
            decoder: self.decoder.bind(g, tracked),
        }
    }

    /// `x: [B, state] -> z: [B, latent]`; with a tangent `ẋ` also returns `∇Ψ(x) ẋ`.
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &AeVars,
        x: Var,
        tangent: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        match &self.spec {
            AutoencoderSpec::Mlp { encoder, .. } => match tangent {
                Some(t) => {
                    let (z, tz) = encoder.forward_tangent(g, &vars.encoder, x, t)?;
                    Ok((z, Some(tz)))
                }
                None => Ok((encoder.forward(g, &vars.encoder, x)?, None)),
            },
            AutoencoderSpec::Conv(c) => c.encode(g, &vars.encoder, x, tangent),
        }
    }

    /// `z: [B, latent] -> x̂: [B, state]`; with a tangent `ż` also returns `∇Φ(z) ż`.
    pub fn decode(
        &self,
        g: &mut Graph,
        vars: &AeVars,
        z: Var,
        tangent: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        match &self.spec {
            AutoencoderSpec::Mlp { decoder, .. } => match tangent {
                Some(t) => {
                    let (x, tx) = decoder.forward_tangent(g, &vars.decoder, z, t)?;
                    Ok((x, Some(tx)))
                }
                None => Ok((decoder.forward(g, &vars.decoder, z)?, None)),
            },
            AutoencoderSpec::Conv(c) => c.decode(g, &vars.decoder, z, tangent),
        }
    }

    fn map_rows(&self, input: &[f64], width: usize, encode: bool) -> Result<Vec<f64>> {
        if !input.len().is_multiple_of(width) {
            return Err(dim_err(
                "autoencoder",
                format!("{} values are not rows of width {width}", input.len()),
            ));
        }
        let mut out = Vec::new();
        for chunk in input.chunks(EVAL_CHUNK * width) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let x = g.constant(Tensor::new(vec![chunk.len() / width, width], chunk.to_vec())?);
            let (y, _) = if encode {
                self.encode(&mut g, &vars, x, None)?
            } else {
                self.decode(&mut g, &vars, x, None)?
            };
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }

    /// Encodes row-major states `[rows, state]` into `[rows, latent]`.
    pub fn encode_rows(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.map_rows(x, self.state_dim(), true)
    }

    /// Decodes row-major latents `[rows, latent]` into `[rows, state]`.
    pub fn decode_rows(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.map_rows(z, self.latent_dim(), false)
    }

    /// Jacobian of the encoder at a single state, `latent x state`.
    pub fn encoder_jacobian(&self, x: &[f64]) -> Result<Tensor> {
        tensor::encoder_jacobian(
            |g, xv| {
                let vars = self.bind(g, false);
                Ok(self.encode(g, &vars, xv, None)?.0)
            },
            x,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn aug_rows(z: &[f64], n: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![z.len() / n, n], z.to_vec()).unwrap());
        let a = quad_aug(&mut g, zv).unwrap();
        g.value(a).data().to_vec()
    }

    #[test]
    fn quad_aug_examples() {
        assert_eq!(aug_rows(&[1.0, 2.0], 2), vec![1.0, 2.0, 1.0, 2.0, 2.0, 4.0]);
        assert_eq!(aug_rows(&[0.0; 3], 3), vec![0.0; 12]);
        assert_eq!(
            aug_rows(&[1.0, 0.0, -1.0], 3),
            vec![1.0, 0.0, -1.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn quad_aug_tangent_matches_difference_quotient() {
        let z = [0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let t = [1.0, 0.5, -2.0, 0.2, 0.0, 1.5];
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(vec![2, 3], z.to_vec()).unwrap());
        let tv = g.constant(Tensor::new(vec![2, 3], t.to_vec()).unwrap());
        let d = quad_aug_tangent(&mut g, zv, tv).unwrap();
        let eps = 1e-6;
        let shift = |s: f64| -> Vec<f64> {
            let zs: Vec<f64> = z.iter().zip(&t).map(|(a, b)| a + s * b).collect();
            aug_rows(&zs, 3)
        };
        let (p, m) = (shift(eps), shift(-eps));
        for (k, dv) in g.value(d).data().iter().enumerate() {
            assert!((dv - (p[k] - m[k]) / (2.0 * eps)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let spec = MlpSpec {
            input: 2,
            output: 3,
            width: 8,
            hidden_layers: 3,
            skip: true,
        };
        let mut p = spec.init(&mut rng(0));
        p.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 2, vec![0.4, -7.0]).unwrap());
        let y = spec.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn single_layer_is_affine() {
        let spec = MlpSpec {
            input: 2,
            output: 2,
            width: 0,
            hidden_layers: 0,
            skip: false,
        };
        let p = spec.init(&mut rng(1));
        let (w, b) = (p.tensor(0).data().to_vec(), p.tensor(1).data().to_vec());
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 2, vec![2.0, -3.0]).unwrap());
        let y = spec.forward(&mut g, &vars, x).unwrap();
        let expect = [2.0 * w[0] - 3.0 * w[2] + b[0], 2.0 * w[1] - 3.0 * w[3] + b[1]];
        for (a, e) in g.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    /// Direct evaluation of a 2 -> 8 -> 8 -> 3 silu network from raw arrays.
    fn scratch_forward(p: &ParamStore, x: &[f64]) -> Vec<f64> {
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let affine = |w: &Tensor, b: &Tensor, a: &[f64]| -> Vec<f64> {
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            (0..fo)
                .map(|o| b.data()[o] + (0..fi).map(|i| a[i] * w.data()[i * fo + o]).sum::<f64>())
                .collect()
        };
        let h0: Vec<f64> = affine(p.tensor(0), p.tensor(1), x).into_iter().map(silu).collect();
        let h1: Vec<f64> = affine(p.tensor(2), p.tensor(3), &h0)
            .into_iter()
            .zip(&h0)
            .map(|(v, skip)| silu(v) + skip)
            .collect();
        affine(p.tensor(4), p.tensor(5), &h1)
    }

    #[test]
    fn mlp_matches_scratch_forward() {
        let spec = MlpSpec {
            input: 2,
            output: 3,
            width: 8,
            hidden_layers: 2,
            skip: true,
        };
        let p = spec.init(&mut rng(42));
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let y = spec.forward(&mut g, &vars, x).unwrap();
        let expect = scratch_forward(&p, &[1.0, 1.0]);
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    fn tangent_check(ae: &Autoencoder, x: &[f64], t: &[f64], rows: usize, encode: bool) {
        let width = x.len() / rows;
        let mut g = Graph::new();
        let vars = ae.bind(&mut g, false);
        let xv = g.constant(Tensor::new(vec![rows, width], x.to_vec()).unwrap());
        let tv = g.constant(Tensor::new(vec![rows, width], t.to_vec()).unwrap());
        let (_, d) = if encode {
            ae.encode(&mut g, &vars, xv, Some(tv)).unwrap()
        } else {
            ae.decode(&mut g, &vars, xv, Some(tv)).unwrap()
        };
        let d = g.value(d.unwrap()).data().to_vec();
        let eps = 1e-6;
        let eval = |s: f64| {
            let xs: Vec<f64> = x.iter().zip(t).map(|(a, b)| a + s * b).collect();
            if encode {
                ae.encode_rows(&xs).unwrap()
            } else {
                ae.decode_rows(&xs).unwrap()
            }
        };
        let (p, m) = (eval(eps), eval(-eps));
        let scale = d.iter().fold(1e-3f64, |s, v| s.max(v.abs()));
        for k in 0..d.len() {
            let fd = (p[k] - m[k]) / (2.0 * eps);
            assert!((d[k] - fd).abs() < 1e-6 * scale, "entry {k}: {} vs {fd}", d[k]);
        }
    }

    #[test]
    fn mlp_tangents_match_difference_quotients() {
        let ae = Autoencoder::init(AutoencoderSpec::mlp(2, 3, 8, 3), &mut rng(3)).unwrap();
        tangent_check(&ae, &[0.5, -1.0, 2.0, 0.3], &[1.0, 0.2, -0.7, 1.1], 2, true);
        tangent_check(&ae, &[0.5, -1.0, 2.0, 0.3, 0.0, 1.0], &[1.0, 0.2, -0.7, 1.1, 0.4, 0.4], 2, false);
    }

    fn small_conv() -> ConvAeSpec {
        ConvAeSpec {
            input_len: 32,
            channels: vec![1, 3, 4],
            latent: 2,
            ..ConvAeSpec::default()
        }
    }

    #[test]
    fn conv_tangents_match_difference_quotients() {
        let ae = Autoencoder::init(AutoencoderSpec::Conv(small_conv()), &mut rng(5)).unwrap();
        let x: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.37).sin()).collect();
        let t: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.11).cos()).collect();
        tangent_check(&ae, &x, &t, 2, true);
        tangent_check(&ae, &[0.3, -0.8, 1.2, 0.5], &[1.0, -0.5, 0.25, 2.0], 2, false);
    }

    #[test]
    fn conv_round_trip_shapes() {
        let spec = ConvAeSpec::default();
        assert_eq!(spec.encoder_lengths().unwrap(), vec![256, 128, 64, 32, 16]);
        assert_eq!(spec.flat_len().unwrap(), 1024);
        assert_eq!(spec.decoder_input(), 20);
        let ae = Autoencoder::init(AutoencoderSpec::Conv(spec), &mut rng(9)).unwrap();
        let x: Vec<f64> = (0..3 * 256).map(|i| (i as f64 * 0.01).sin()).collect();
        let z = ae.encode_rows(&x).unwrap();
        assert_eq!(z.len(), 3 * 4);
        assert_eq!(ae.decode_rows(&z).unwrap().len(), 3 * 256);
    }

    #[test]
    fn zero_decoder_returns_bias_profile() {
        let mut ae = Autoencoder::init(AutoencoderSpec::Conv(small_conv()), &mut rng(2)).unwrap();
        let n = ae.decoder.len();
        for i in 0..n {
            let is_last_bias = i == n - 1;
            if !is_last_bias {
                ae.decoder.tensor_mut(i).data_mut().fill(0.0);
            }
        }
        let bias = ae.decoder.tensor(n - 1).data()[0];
        let out = ae.decode_rows(&[5.0, -3.0, 0.1, 0.2]).unwrap();
        assert!(out.iter().all(|&v| v == bias));
    }

    #[test]
    fn inconsistent_conv_spec_is_rejected() {
        let spec = ConvAeSpec {
            input_len: 30,
            channels: vec![1, 2, 2, 2],
            ..ConvAeSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_jacobian_matches_tangents() {
        let ae = Autoencoder::init(AutoencoderSpec::mlp(2, 3, 8, 3), &mut rng(11)).unwrap();
        let x = [0.7, -0.2];
        let jac = ae.encoder_jacobian(&x).unwrap();
        assert_eq!(jac.shape(), &[3, 2]);
        for (col, t) in [[1.0, 0.0], [0.0, 1.0]].iter().enumerate() {
            let mut g = Graph::new();
            let vars = ae.bind(&mut g, false);
            let xv = g.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
            let tv = g.constant(Tensor::matrix(1, 2, t.to_vec()).unwrap());
            let (_, d) = ae.encode(&mut g, &vars, xv, Some(tv)).unwrap();
            for row in 0..3 {
                let a = jac.data()[row * 2 + col];
                let b = g.value(d.unwrap()).data()[row];
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn record_round_trip_and_layout_check() {
        let ae = Autoencoder::init(AutoencoderSpec::mlp(2, 3, 16, 3), &mut rng(4)).unwrap();
        let json = serde_json::to_string(&ae.to_record()).unwrap();
        let back: AutoencoderRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(Autoencoder::from_record(back).unwrap(), ae);

        let mut bad = ae.to_record();
        bad.version = 99;
        assert!(Autoencoder::from_record(bad).is_err());
        let other = Autoencoder::init(AutoencoderSpec::mlp(2, 3, 8, 3), &mut rng(4)).unwrap();
        assert!(Autoencoder::from_parts(ae.spec.clone(), other.encoder, other.decoder).is_err());
    }
}
