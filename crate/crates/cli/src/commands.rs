//! The generate / train / evaluate pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use quadembed::baselines::{
    fit_linear_embeds, fit_linproj_qopinf, fit_quad_opinf, fit_quadproj_qopinf, BaselineArtifact,
};
use quadembed::eval::{compare_methods, overlay_csv, Method, Surrogate};
use quadembed::odeint::IntegratorConfig;
use quadembed::qdyn::ModelRecord;
use quadembed::systems::{Protocol, SystemKind, TrajectoryDataset};
use quadembed::train::{fit_quad_embeds, training_view, Checkpoint, FitOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Experiment;
use crate::error::CliError;

pub const TRAIN_FILE: &str = "train.qds";
pub const TEST_FILE: &str = "test.qds";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.json";

/// Record of one command's outputs. Timing lives here and nowhere else so
/// that every other artifact is byte-identical across reruns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub system: SystemKind,
    pub method: Option<Method>,
    pub seed: u64,
    /// SHA-256 of each written file.
    pub files: BTreeMap<String, String>,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub finished_unix_s: u64,
}

impl Manifest {
    fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| CliError::Missing(format!("{} not found", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|_| CliError::Missing(format!("{} not found", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    start: Instant,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            files: BTreeMap::new(),
            inputs: BTreeMap::new(),
            start: Instant::now(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Registers a file that was written by someone else.
    fn record(&mut self, name: &str) -> Result<(), CliError> {
        let sum = sha256_file(&self.dir.join(name))?;
        self.files.insert(name.to_string(), sum);
        Ok(())
    }

    fn finish(self, command: &str, exp: &Experiment, method: Option<Method>) -> Result<(), CliError> {
        let m = Manifest {
            command: command.to_string(),
            system: exp.system,
            method,
            seed: exp.seed,
            files: self.files,
            inputs: self.inputs,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let text = serde_json::to_string_pretty(&m).map_err(quadembed::Error::from)?;
        std::fs::write(self.dir.join(MANIFEST), text)?;
        Ok(())
    }
}

pub fn generate(exp: &Experiment) -> Result<(), CliError> {
    let mut out = Outputs::new(exp.data_dir())?;
    log::info!("generating {} training data (seed {})", exp.system, exp.seed);
    let train = Protocol::train(exp.system).generate(exp.seed, 0)?;
    log::info!("generating {} test data", exp.system);
    let test = Protocol::test(exp.system).generate(exp.seed, 1)?;
    out.write(TRAIN_FILE, &train.to_bytes()?)?;
    out.write(TEST_FILE, &test.to_bytes()?)?;
    log::info!(
        "wrote {} training and {} test trajectories to {}",
        train.n_traj(),
        test.n_traj(),
        out.dir.display()
    );
    out.finish("generate", exp, None)
}

/// Loads one split and checks it against the data manifest.
fn load_split(exp: &Experiment, name: &str) -> Result<(TrajectoryDataset, String), CliError> {
    let dir = exp.data_dir();
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "{} not found; run `generate` first",
            path.display()
        )));
    }
    let manifest = Manifest::read(&dir.join(MANIFEST))?;
    let sum = sha256_file(&path)?;
    if manifest.files.get(name) != Some(&sum) {
        return Err(CliError::Mismatch(format!("{} does not match its manifest checksum", path.display())));
    }
    let ds = TrajectoryDataset::read(&path)?;
    if ds.meta().system != exp.system {
        return Err(CliError::Mismatch(format!(
            "{} holds {} data, expected {}",
            path.display(),
            ds.meta().system,
            exp.system
        )));
    }
    Ok((ds, sum))
}

/// Serialized regression baseline together with the system it was fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionCheckpoint {
    pub version: u32,
    pub system: SystemKind,
    pub artifact: BaselineArtifact,
}

pub fn train(exp: &Experiment, method: Method) -> Result<(), CliError> {
    crate::config::check_combination(exp.system, method)?;
    let (data, sum) = load_split(exp, TRAIN_FILE)?;
    let mut out = Outputs::new(exp.method_dir(method))?;
    out.inputs.insert(TRAIN_FILE.to_string(), sum);
    let snapshot = Experiment {
        method: Some(method),
        ..exp.clone()
    }
    .snapshot();
    out.write("config.toml", toml::to_string(&snapshot).map_err(|e| CliError::Config(e.to_string()))?.as_bytes())?;
    log::info!("training {method} on {} ({} rows)", exp.system, data.n_rows());

    if method.is_embedding() {
        let view = training_view(&data);
        let opts = FitOptions {
            checkpoint_dir: Some(&out.dir),
            on_epoch: None,
        };
        let outcome = match method {
            Method::QuadEmbeds => fit_quad_embeds(&view, &exp.train, opts)?,
            _ => fit_linear_embeds(&view, &exp.train, opts)?,
        };
        out.record(CHECKPOINT)?;
        out.write("history.csv", outcome.history.to_csv()?.as_bytes())?;
        if let Some(last) = outcome.history.last() {
            log::info!("final loss {:.6e}", last.total);
        }
    } else {
        let artifact = match method {
            Method::QuadOpinf => BaselineArtifact::QuadOpinf {
                model: ModelRecord::from_model(&fit_quad_opinf(&data)?),
            },
            Method::LinprojQopinf => {
                let (basis, model) = fit_linproj_qopinf(&data, exp.rank)?;
                BaselineArtifact::LinprojQopinf {
                    basis,
                    model: ModelRecord::from_model(&model),
                }
            }
            _ => {
                let (manifold, model) = fit_quadproj_qopinf(&data, exp.rank)?;
                BaselineArtifact::QuadprojQopinf {
                    manifold,
                    model: ModelRecord::from_model(&model),
                }
            }
        };
        let ck = RegressionCheckpoint {
            version: 1,
            system: exp.system,
            artifact,
        };
        out.write(CHECKPOINT, serde_json::to_string(&ck).map_err(quadembed::Error::from)?.as_bytes())?;
    }
    out.finish("train", exp, Some(method))
}

fn load_surrogate(exp: &Experiment, method: Method, train_sum: &str, state_dim: usize) -> Result<Surrogate, CliError> {
    let dir = exp.method_dir(method);
    let ck_path = dir.join(CHECKPOINT);
    if !ck_path.exists() {
        return Err(CliError::Missing(format!(
            "{} not found; run `train --method {method}` first",
            ck_path.display()
        )));
    }
    let manifest = Manifest::read(&dir.join(MANIFEST))?;
    if manifest.inputs.get(TRAIN_FILE).map(String::as_str) != Some(train_sum) {
        return Err(CliError::Mismatch(format!(
            "{method} checkpoint was trained on different data than {}",
            exp.data_dir().join(TRAIN_FILE).display()
        )));
    }
    let (system, sur) = if method.is_embedding() {
        let ck = Checkpoint::read(&ck_path)?;
        let sur = Surrogate::Embedding {
            autoencoder: ck.autoencoder()?,
            model: ck.model.model()?,
            data_scale: ck.data_scale,
        };
        (ck.system, sur)
    } else {
        let text = std::fs::read_to_string(&ck_path)?;
        let ck: RegressionCheckpoint =
            serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("{}: {e}", ck_path.display())))?;
        let sur = match ck.artifact {
            BaselineArtifact::QuadOpinf { model } if method == Method::QuadOpinf => Surrogate::Direct {
                model: model.model()?,
            },
            BaselineArtifact::LinprojQopinf { basis, model } if method == Method::LinprojQopinf => Surrogate::Pod {
                basis,
                model: model.model()?,
            },
            BaselineArtifact::QuadprojQopinf { manifold, model } if method == Method::QuadprojQopinf => {
                Surrogate::Manifold {
                    manifold,
                    model: model.model()?,
                }
            }
            _ => return Err(CliError::Mismatch(format!("{} does not hold a {method} model", ck_path.display()))),
        };
        (ck.system, sur)
    };
    use quadembed::eval::Coordinates;
    if system != exp.system || sur.state_dim() != state_dim {
        return Err(CliError::Mismatch(format!(
            "{method} checkpoint is for {system} with state dimension {}, evaluating {} with {state_dim}",
            sur.state_dim(),
            exp.system
        )));
    }
    Ok(sur)
}

pub fn evaluate(exp: &Experiment) -> Result<(), CliError> {
    let (train, train_sum) = load_split(exp, TRAIN_FILE)?;
    let (test, test_sum) = load_split(exp, TEST_FILE)?;
    let test = match exp.n_test {
        Some(k) => test.first_trajectories(k),
        None => test,
    };
    let surrogates = exp
        .eval_methods
        .iter()
        .map(|&m| load_surrogate(exp, m, &train_sum, test.dim()).map(|s| (m, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Outputs::new(exp.eval_dir())?;
    out.inputs.insert(TRAIN_FILE.to_string(), train_sum);
    out.inputs.insert(TEST_FILE.to_string(), test_sum);
    for &m in &exp.eval_methods {
        out.inputs
            .insert(format!("{m}/{CHECKPOINT}"), sha256_file(&exp.method_dir(m).join(CHECKPOINT))?);
    }
    log::info!("evaluating {} methods on {} test trajectories", surrogates.len(), test.n_traj());
    let refs: Vec<(Method, &Surrogate)> = surrogates.iter().map(|(m, s)| (*m, s)).collect();
    let cmp = compare_methods(&refs, &test, train.max_abs_state(), &IntegratorConfig::default())?;
    out.write("report.csv", cmp.report.to_csv()?.as_bytes())?;
    out.write("violin.csv", cmp.report.violin_csv()?.as_bytes())?;

    let mut summary = Vec::new();
    for &m in &exp.eval_methods {
        let s = cmp.report.summary(m);
        log::info!(
            "{m}: {} stable, {} unstable, median log error {}",
            s.n_stable,
            s.n_unstable,
            s.quartiles.map_or("n/a".to_string(), |q| format!("{:.3}", q[1]))
        );
        summary.push(serde_json::json!({
            "method": m,
            "stable": s.n_stable,
            "unstable": s.n_unstable,
            "error_median_log_quartiles": s.quartiles,
            "median_error_relative": s.median_relative,
        }));
    }
    let text = serde_json::to_string_pretty(&summary).map_err(quadembed::Error::from)?;
    out.write("summary.json", text.as_bytes())?;

    let reference = if exp.eval_methods.contains(&Method::QuadEmbeds) {
        Method::QuadEmbeds
    } else {
        exp.eval_methods[0]
    };
    for (rank, ic) in cmp.report.worst_ics(reference, 4).into_iter().enumerate() {
        let columns: Vec<(Method, &[f64])> = exp
            .eval_methods
            .iter()
            .enumerate()
            .map(|(mi, m)| (*m, cmp.rollouts[mi][ic].states.as_slice()))
            .collect();
        let text = overlay_csv(test.trajectory_times(ic), test.trajectory_states(ic), &columns)?;
        out.write(&format!("worst{}_ic{ic}.csv", rank + 1), text.as_bytes())?;
    }
    out.finish("evaluate", exp, None)
}

/// Generates data, trains every evaluated method and evaluates them.
pub fn all(exp: &Experiment) -> Result<(), CliError> {
    generate(exp)?;
    for &m in &exp.eval_methods {
        train(exp, m)?;
    }
    evaluate(exp)
}
