//! Experiment configuration: a TOML file whose values are overridden by
//! command-line flags, resolved against the per-system defaults.

use std::path::{Path, PathBuf};

use quadembed::eval::Method;
use quadembed::systems::SystemKind;
use quadembed::train::{PruneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Training settings; every field is optional and falls back to the
/// system's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub latent_dim: Option<usize>,
    pub width: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub decay_every: Option<usize>,
    pub lambda: Option<[f64; 3]>,
    pub stable: Option<bool>,
    pub ridge: Option<f64>,
    pub prune_threshold: Option<f64>,
    pub prune_start: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    /// Number of POD modes for the projection baselines.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub methods: Option<Vec<Method>>,
    /// Evaluate only the first `n_test` test trajectories.
    pub n_test: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: Option<SystemKind>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub regression: RegressionSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `other` win.
    pub fn overlay(mut self, other: ConfigFile) -> Self {
        macro_rules! take {
            ($($dst:expr => $src:expr),* $(,)?) => { $( if $src.is_some() { $dst = $src; } )* };
        }
        take!(
            self.system => other.system,
            self.method => other.method,
            self.seed => other.seed,
            self.out_dir => other.out_dir,
            self.train.latent_dim => other.train.latent_dim,
            self.train.width => other.train.width,
            self.train.hidden_layers => other.train.hidden_layers,
            self.train.lr => other.train.lr,
            self.train.batch_size => other.train.batch_size,
            self.train.weight_decay => other.train.weight_decay,
            self.train.epochs => other.train.epochs,
            self.train.decay_every => other.train.decay_every,
            self.train.lambda => other.train.lambda,
            self.train.stable => other.train.stable,
            self.train.ridge => other.train.ridge,
            self.train.prune_threshold => other.train.prune_threshold,
            self.train.prune_start => other.train.prune_start,
            self.regression.rank => other.regression.rank,
            self.eval.methods => other.eval.methods,
            self.eval.n_test => other.eval.n_test,
        );
        self
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub system: SystemKind,
    pub method: Option<Method>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub rank: usize,
    pub eval_methods: Vec<Method>,
    pub n_test: Option<usize>,
}

pub fn default_methods(system: SystemKind) -> Vec<Method> {
    match system {
        SystemKind::Burgers => vec![Method::QuadEmbeds, Method::LinprojQopinf, Method::QuadprojQopinf],
        _ => vec![Method::QuadEmbeds, Method::LinearEmbeds, Method::QuadOpinf],
    }
}

/// Rejects method/system pairs that have no meaning: the POD baselines are
/// defined for the Burgers snapshots and linear embeddings for the MLP systems.
pub fn check_combination(system: SystemKind, method: Method) -> Result<(), CliError> {
    let ok = match method {
        Method::QuadEmbeds | Method::QuadOpinf => true,
        Method::LinearEmbeds => system != SystemKind::Burgers,
        Method::LinprojQopinf | Method::QuadprojQopinf => system == SystemKind::Burgers,
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("method {method} is not available for system {system}")))
    }
}

impl Experiment {
    pub fn resolve(file: ConfigFile) -> Result<Self, CliError> {
        let system = file
            .system
            .ok_or_else(|| CliError::Config("no system given (use --system or the config file)".into()))?;
        let t = &file.train;
        let mut train = TrainConfig::for_system(system);
        if let Some(e) = t.epochs {
            if e == 0 {
                return Err(CliError::Config("epochs must be positive".into()));
            }
            train = train.with_epochs(e);
        }
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = t.$field { train.$field = v; } )* };
        }
        set!(latent_dim, width, hidden_layers, lr, batch_size, weight_decay, decay_every, lambda, stable, ridge);
        train.prune = match (t.prune_threshold, t.prune_start) {
            (Some(threshold), start) => Some(PruneConfig {
                threshold,
                start_epoch: start.unwrap_or(0),
            }),
            (None, Some(_)) => return Err(CliError::Config("prune_start given without prune_threshold".into())),
            (None, None) => None,
        };
        let seed = file.seed.unwrap_or(0);
        train.seed = seed;
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(m) = file.method {
            check_combination(system, m)?;
        }
        let eval_methods = file.eval.methods.clone().unwrap_or_else(|| default_methods(system));
        for m in &eval_methods {
            check_combination(system, *m)?;
        }
        let rank = file.regression.rank.unwrap_or(4);
        if rank == 0 {
            return Err(CliError::Config("rank must be positive".into()));
        }
        Ok(Self {
            system,
            method: file.method,
            seed,
            out_dir: file.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
            train,
            rank,
            eval_methods,
            n_test: file.eval.n_test,
        })
    }

    /// A configuration file that reproduces this experiment on its own.
    pub fn snapshot(&self) -> ConfigFile {
        let t = &self.train;
        ConfigFile {
            system: Some(self.system),
            method: self.method,
            seed: Some(self.seed),
            out_dir: Some(self.out_dir.clone()),
            train: TrainSection {
                latent_dim: Some(t.latent_dim),
                width: Some(t.width),
                hidden_layers: Some(t.hidden_layers),
                lr: Some(t.lr),
                batch_size: Some(t.batch_size),
                weight_decay: Some(t.weight_decay),
                epochs: Some(t.epochs),
                decay_every: Some(t.decay_every),
                lambda: Some(t.lambda),
                stable: Some(t.stable),
                ridge: Some(t.ridge),
                prune_threshold: t.prune.map(|p| p.threshold),
                prune_start: t.prune.map(|p| p.start_epoch),
            },
            regression: RegressionSection { rank: Some(self.rank) },
            eval: EvalSection {
                methods: Some(self.eval_methods.clone()),
                n_test: self.n_test,
            },
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir
            .join(self.system.tag())
            .join("data")
            .join(format!("seed{}", self.seed))
    }

    pub fn method_dir(&self, method: Method) -> PathBuf {
        self.out_dir
            .join(self.system.tag())
            .join(method.tag())
            .join(format!("seed{}", self.seed))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir
            .join(self.system.tag())
            .join("eval")
            .join(format!("seed{}", self.seed))
    }
}
