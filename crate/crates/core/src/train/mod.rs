//! Joint training of an autoencoder and its latent dynamics.

mod latent;
mod loss;
mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Autoencoder, AutoencoderRecord, AutoencoderSpec, ConvAeSpec};
use crate::qdyn::ModelRecord;
use crate::systems::{SystemKind, TrajectoryDataset};
use crate::tensor::{Graph, Tensor};

pub use latent::{prune_quadratic, LatentForm, LatentModel, LatentSpec};
pub use loss::{build_loss, evaluate_loss, mixed_norm, mixed_norm_rows, LossGraph, LossValues, LossWeights};
pub use optim::{adam_step, lr_at, AdamState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Relative magnitude below which entries are masked.
    pub threshold: f64,
    /// Epoch at whose start the mask is computed.
    pub start_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Neurons per hidden layer (MLP autoencoders only).
    pub width: usize,
    pub hidden_layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Learning rate is divided by 10 every `decay_every` epochs; checkpoints
    /// are written on the same period.
    pub decay_every: usize,
    /// `(λ₁, λ₂, λ₃)`: reconstruction, decoder-derivative, encoder-derivative.
    pub lambda: [f64; 3],
    pub stable: bool,
    pub ridge: f64,
    pub prune: Option<PruneConfig>,
    pub seed: u64,
}

impl TrainConfig {
    /// Published hyper-parameters for each benchmark.
    pub fn for_system(system: SystemKind) -> Self {
        let base = Self {
            latent_dim: 3,
            width: 8,
            hidden_layers: 3,
            lr: 3e-3,
            batch_size: 32,
            weight_decay: 1e-5,
            epochs: 4000,
            decay_every: 1500,
            lambda: [1.0, 0.0, 1.0],
            stable: true,
            ridge: 0.0,
            prune: None,
            seed: 0,
        };
        match system {
            SystemKind::Pendulum => base,
            SystemKind::Lv => Self {
                width: 16,
                batch_size: 64,
                ..base
            },
            SystemKind::Burgers => Self {
                latent_dim: 4,
                lr: 5e-3,
                batch_size: 64,
                epochs: 400,
                decay_every: 150,
                lambda: [10.0, 0.0, 1.0],
                ..base
            },
        }
    }

    /// Same configuration with a different epoch budget; the decay period is
    /// scaled in proportion so the schedule keeps its shape.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let period = (self.decay_every as f64 * epochs as f64 / self.epochs as f64).round() as usize;
        Self {
            epochs,
            decay_every: period.clamp(1, epochs.max(1)),
            ..self.clone()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::new(self.lambda[0], self.lambda[1], self.lambda[2])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return bad("batch_size, epochs and decay_every must be positive".into());
        }
        if self.decay_every > self.epochs {
            return bad(format!(
                "decay_every ({}) must not exceed epochs ({})",
                self.decay_every, self.epochs
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad(format!("loss weights {:?} must be non-negative", self.lambda));
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be non-negative".into());
        }
        if let Some(p) = &self.prune {
            if !(p.threshold >= 0.0) {
                return bad("pruning threshold must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Autoencoder architecture for a dataset of the given system and state size.
    pub fn autoencoder_spec(&self, system: SystemKind, state_dim: usize) -> AutoencoderSpec {
        match system {
            SystemKind::Burgers => AutoencoderSpec::Conv(ConvAeSpec {
                input_len: state_dim,
                latent: self.latent_dim,
                ..ConvAeSpec::default()
            }),
            _ => AutoencoderSpec::mlp(state_dim, self.latent_dim, self.width, self.hidden_layers),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    /// Empty when the decoder-derivative term is disabled.
    pub x_from_z: Option<f64>,
    pub z_from_x: f64,
    pub lr: f64,
}

/// Per-epoch loss record. Wall-clock times are kept apart so that histories
/// of identical runs compare equal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub wall_times: Vec<f64>,
}

impl TrainHistory {
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
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self {
            records,
            wall_times: Vec::new(),
        })
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Everything needed to resume or evaluate a trained embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub system: SystemKind,
    /// Factor that was applied to the training data before fitting.
    pub data_scale: f64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub autoencoder: AutoencoderRecord,
    pub latent: LatentModel,
    pub model: ModelRecord,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version),
            });
        }
        Ok(ck)
    }

    pub fn autoencoder(&self) -> Result<Autoencoder> {
        Autoencoder::from_record(self.autoencoder.clone())
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub autoencoder: Autoencoder,
    pub latent: LatentModel,
    pub history: TrainHistory,
    pub optimizer: AdamState,
}

/// Optional side channels of a training run.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Directory receiving `checkpoint.json` every `decay_every` epochs and at the end.
    pub checkpoint_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

fn make_checkpoint(
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
    epoch: usize,
    ae: &Autoencoder,
    latent: &LatentModel,
    opt: &AdamState,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        system: ds.meta().system,
        data_scale: ds.meta().scale,
        epoch,
        config: cfg.clone(),
        autoencoder: ae.to_record(),
        latent: latent.clone(),
        model: latent.record()?,
        optimizer: opt.clone(),
    })
}

/// Trains an autoencoder jointly with latent dynamics of the given form.
pub fn fit_embedding(
    dataset: &TrajectoryDataset,
    cfg: &TrainConfig,
    form: LatentForm,
    mut opts: FitOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.n_rows() == 0 {
        return Err(Error::Contract("empty dataset".into()));
    }
    let d = dataset.dim();
    let spec = cfg.autoencoder_spec(dataset.meta().system, d);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut ae = Autoencoder::init(spec, &mut init_rng)?;
    let latent_spec = LatentSpec {
        dim: cfg.latent_dim,
        form,
        stable: cfg.stable,
        bias: false,
        ridge: cfg.ridge,
    };
    let mut latent = LatentModel::init(latent_spec, &mut init_rng)?;

    let sizes: Vec<usize> = ae
        .encoder
        .iter()
        .chain(ae.decoder.iter())
        .chain(latent.params.iter())
        .map(|(_, t)| t.numel())
        .collect();
    let mut opt = AdamState::new(&sizes);
    let weights = cfg.weights();
    let n = dataset.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let start = Instant::now();
    let mut xb = Vec::with_capacity(cfg.batch_size * d);
    let mut xdb = Vec::with_capacity(cfg.batch_size * d);

    for epoch in 0..cfg.epochs {
        if let Some(p) = &cfg.prune {
            if epoch == p.start_epoch {
                latent.prune(p.threshold)?;
            }
        }
        let lr = lr_at(epoch, cfg.lr, cfg.decay_every);
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(cfg.batch_size) {
            xb.clear();
            xdb.clear();
            for &i in chunk {
                xb.extend_from_slice(dataset.state(i));
                xdb.extend_from_slice(dataset.deriv(i));
            }
            let rows = chunk.len();
            let mut g = Graph::new();
            let ae_vars = ae.bind(&mut g, true);
            let lat_vars = latent.bind(&mut g, true);
            let x = g.constant(Tensor::new(vec![rows, d], xb.clone())?);
            let xd = g.constant(Tensor::new(vec![rows, d], xdb.clone())?);
            let loss = build_loss(&mut g, &ae, &ae_vars, &latent, &lat_vars, x, xd, &weights)?;
            let total = g.value(loss.total).data()[0];
            if !total.is_finite() {
                return Err(Error::TrainingAborted {
                    epoch,
                    reason: format!("non-finite loss {total}"),
                });
            }
            g.backward(loss.total)?;
            let vals = loss.values(&g);
            let frac = rows as f64 / n as f64;
            sums[0] += frac * total;
            sums[1] += frac * vals.recon;
            sums[2] += frac * vals.x_from_z.unwrap_or(0.0);
            sums[3] += frac * vals.z_from_x;

            let grads: Vec<&[f64]> = ae_vars
                .encoder
                .iter()
                .chain(&ae_vars.decoder)
                .chain(&lat_vars)
                .map(|v| g.grad(*v).expect("tracked leaf").data())
                .collect();
            let mut bufs: Vec<&mut [f64]> = ae
                .encoder
                .tensors_mut()
                .chain(ae.decoder.tensors_mut())
                .chain(latent.params.tensors_mut())
                .map(|t| t.data_mut())
                .collect();
            adam_step(&mut bufs, &grads, &mut opt, lr, cfg.weight_decay)
                .map_err(|e| Error::TrainingAborted {
                    epoch,
                    reason: e.to_string(),
                })?;
            latent.apply_masks();
        }
        let rec = EpochRecord {
            epoch,
            total: sums[0],
            recon: sums[1],
            x_from_z: (weights.x_from_z != 0.0).then_some(sums[2]),
            z_from_x: sums[3],
            lr,
        };
        history.records.push(rec);
        history.wall_times.push(start.elapsed().as_secs_f64());
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&rec);
        }
        log::debug!("epoch {epoch}: loss {:.6e} (lr {lr:.1e})", rec.total);
        let done = epoch + 1;
        if let Some(dir) = opts.checkpoint_dir {
            if done % cfg.decay_every == 0 || done == cfg.epochs {
                make_checkpoint(dataset, cfg, done, &ae, &latent, &opt)?.write(&dir.join("checkpoint.json"))?;
                log::info!("epoch {done}/{}: loss {:.6e}, checkpoint written", cfg.epochs, rec.total);
            }
        }
    }
    Ok(TrainOutcome {
        autoencoder: ae,
        latent,
        history,
        optimizer: opt,
    })
}

/// Data as seen by the autoencoder: Burgers snapshots are divided by their
/// largest magnitude, other systems are used as is. The applied factor is
/// recorded in the dataset's `scale`.
pub fn training_view(dataset: &TrajectoryDataset) -> TrajectoryDataset {
    match dataset.meta().system {
        SystemKind::Burgers => {
            let m = dataset.max_abs_state();
            if m > 0.0 {
                dataset.scaled(1.0 / m)
            } else {
                dataset.clone()
            }
        }
        _ => dataset.clone(),
    }
}

/// Quadratic embeddings: autoencoder plus quadratic latent dynamics.
pub fn fit_quad_embeds(
    dataset: &TrajectoryDataset,
    cfg: &TrainConfig,
    opts: FitOptions<'_>,
) -> Result<TrainOutcome> {
    fit_embedding(dataset, cfg, LatentForm::Quadratic, opts)
}

impl TrainOutcome {
    pub fn checkpoint(&self, dataset: &TrajectoryDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
        make_checkpoint(
            dataset,
            cfg,
            self.history.records.len(),
            &self.autoencoder,
            &self.latent,
            &self.optimizer,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qdyn::check_stable_structure;
    use crate::systems::{generate_dataset, IcSampler};

    fn small_pendulum() -> TrajectoryDataset {
        let ic = IcSampler::Uniform { low: -3.0, high: 3.0 };
        generate_dataset(SystemKind::Pendulum, 6, 60, (0.0, 12.0), &ic, 0, 0).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 2,
            width: 6,
            hidden_layers: 2,
            lr: 1e-2,
            batch_size: 16,
            epochs: 120,
            decay_every: 100,
            ..TrainConfig::for_system(SystemKind::Pendulum)
        }
    }

    #[test]
    fn table_defaults() {
        let p = TrainConfig::for_system(SystemKind::Pendulum);
        assert_eq!((p.width, p.latent_dim, p.batch_size, p.epochs, p.decay_every), (8, 3, 32, 4000, 1500));
        assert_eq!((p.lr, p.weight_decay, p.lambda), (3e-3, 1e-5, [1.0, 0.0, 1.0]));
        let l = TrainConfig::for_system(SystemKind::Lv);
        assert_eq!((l.width, l.batch_size, l.lr), (16, 64, 3e-3));
        let b = TrainConfig::for_system(SystemKind::Burgers);
        assert_eq!((b.latent_dim, b.lr, b.batch_size, b.epochs, b.decay_every), (4, 5e-3, 64, 400, 150));
        assert_eq!(b.lambda, [10.0, 0.0, 1.0]);
    }

    #[test]
    fn epoch_override_scales_decay_period() {
        let p = TrainConfig::for_system(SystemKind::Pendulum).with_epochs(1000);
        assert_eq!((p.epochs, p.decay_every), (1000, 375));
        p.validate().unwrap();
        let b = TrainConfig::for_system(SystemKind::Burgers).with_epochs(2);
        assert_eq!(b.decay_every, 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = tiny_config();
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { lambda: [1.0, -1.0, 0.0], ..ok.clone() },
            TrainConfig { latent_dim: 0, ..ok.clone() },
            TrainConfig { decay_every: ok.epochs + 1, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn loss_drops_and_run_is_reproducible() {
        let ds = small_pendulum();
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let out = fit_quad_embeds(
            &ds,
            &cfg,
            FitOptions {
                checkpoint_dir: Some(dir.path()),
                on_epoch: None,
            },
        )
        .unwrap();
        let first = out.history.first().unwrap().total;
        let last = out.history.last().unwrap().total;
        assert_eq!(out.history.records.len(), 120);
        assert!(last < 0.2 * first, "{first} -> {last}");

        let again = fit_quad_embeds(&ds, &cfg, FitOptions::default()).unwrap();
        assert_eq!(again.history, TrainHistory {
            wall_times: again.history.wall_times.clone(),
            ..out.history.clone()
        });

        let ck = Checkpoint::read(&dir.path().join("checkpoint.json")).unwrap();
        assert_eq!(ck.epoch, 120);
        assert_eq!(ck.autoencoder().unwrap(), out.autoencoder);
        check_stable_structure(&ck.model.model().unwrap(), 1e-12).unwrap();
    }

    #[test]
    fn history_csv_round_trip() {
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    total: 1.25,
                    recon: 0.5,
                    x_from_z: None,
                    z_from_x: 0.75,
                    lr: 3e-3,
                },
                EpochRecord {
                    epoch: 1,
                    total: 0.1 + 0.2,
                    recon: 0.1,
                    x_from_z: Some(0.05),
                    z_from_x: 0.2,
                    lr: 3e-4,
                },
            ],
            wall_times: vec![],
        };
        let text = h.to_csv().unwrap();
        assert!(text.starts_with("epoch,total,recon,x_from_z,z_from_x,lr\n"));
        assert_eq!(TrainHistory::from_csv(&text).unwrap(), h);
    }

    #[test]
    fn pruning_run_keeps_masked_entries_zero() {
        let ds = small_pendulum();
        let cfg = TrainConfig {
            epochs: 20,
            decay_every: 20,
            prune: Some(PruneConfig {
                threshold: 0.5,
                start_epoch: 5,
            }),
            ..tiny_config()
        };
        let out = fit_quad_embeds(&ds, &cfg, FitOptions::default()).unwrap();
        let mask = out.latent.masks[2].as_ref().expect("mask set");
        let h = out.latent.params.tensor(2).data();
        assert!(mask.iter().zip(h).all(|(m, v)| *m == 1.0 || *v == 0.0));
        assert!(mask.contains(&0.0));
    }
}
