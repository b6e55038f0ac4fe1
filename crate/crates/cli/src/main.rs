mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quadembed::eval::Method;
use quadembed::systems::SystemKind;

use crate::config::{ConfigFile, Experiment};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "quadembed", version, about = "Learn quadratic embeddings of nonlinear dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training and test trajectories of a system.
    Generate(Flags),
    /// Fit one method on the generated training data.
    Train(Flags),
    /// Compare trained methods on the test trajectories.
    Evaluate(Flags),
    /// Generate, train every evaluated method, then evaluate.
    All(Flags),
}

#[derive(Args, Clone, Default)]
struct Flags {
    /// TOML configuration file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// pendulum, lv or burgers.
    #[arg(long)]
    system: Option<String>,
    /// quad-embeds, linear-embeds, quad-opinf, linproj-qopinf or quadproj-qopinf.
    #[arg(long)]
    method: Option<String>,
    /// Methods to evaluate (comma separated).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Seed for data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Root of the run directory tree.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs; the decay period scales with it.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Latent dimension of the learned embedding.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Hidden width of the MLP autoencoder.
    #[arg(long)]
    width: Option<usize>,
    /// Hidden layers of the MLP autoencoder.
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// Decoupled weight decay of AdamW.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Learning-rate decay period in epochs.
    #[arg(long)]
    decay_every: Option<usize>,
    /// Loss weights λ1,λ2,λ3 for reconstruction, decoder and encoder derivative terms.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lambda: Option<Vec<f64>>,
    /// Train the latent model without the stability parameterization.
    #[arg(long)]
    unconstrained: bool,
    /// ε in R = L Lᵀ + ε I.
    #[arg(long)]
    ridge: Option<f64>,
    /// Relative magnitude below which latent operator entries are pruned.
    #[arg(long)]
    prune_threshold: Option<f64>,
    /// Epoch at which pruning is applied.
    #[arg(long)]
    prune_start: Option<usize>,
    /// POD modes for the projection baselines.
    #[arg(long)]
    rank: Option<usize>,
    /// Evaluate only the first N test trajectories.
    #[arg(long)]
    n_test: Option<usize>,
}

impl Flags {
    fn to_config(&self) -> Result<ConfigFile, CliError> {
        let mut c = ConfigFile {
            system: self.system.as_deref().map(str::parse::<SystemKind>).transpose()?,
            method: self.method.as_deref().map(str::parse::<Method>).transpose()?,
            seed: self.seed,
            out_dir: self.out.clone(),
            ..ConfigFile::default()
        };
        c.eval.methods = self
            .methods
            .as_ref()
            .map(|v| v.iter().map(|s| s.parse::<Method>()).collect::<Result<Vec<_>, _>>())
            .transpose()?;
        c.eval.n_test = self.n_test;
        c.regression.rank = self.rank;
        let t = &mut c.train;
        t.epochs = self.epochs;
        t.lr = self.lr;
        t.batch_size = self.batch_size;
        t.latent_dim = self.latent_dim;
        t.width = self.width;
        t.hidden_layers = self.hidden_layers;
        t.weight_decay = self.weight_decay;
        t.decay_every = self.decay_every;
        t.lambda = match self.lambda.as_deref() {
            None => None,
            Some(&[a, b, c]) => Some([a, b, c]),
            Some(v) => return Err(CliError::Config(format!("--lambda needs 3 values, got {}", v.len()))),
        };
        t.stable = self.unconstrained.then_some(false);
        t.ridge = self.ridge;
        t.prune_threshold = self.prune_threshold;
        t.prune_start = self.prune_start;
        Ok(c)
    }

    fn resolve(&self) -> Result<Experiment, CliError> {
        let base = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Experiment::resolve(base.overlay(self.to_config()?))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(f) => commands::generate(&f.resolve()?),
        Command::Train(f) => {
            let exp = f.resolve()?;
            let method = exp
                .method
                .ok_or_else(|| CliError::Config("train needs --method".into()))?;
            commands::train(&exp, method)
        }
        Command::Evaluate(f) => commands::evaluate(&f.resolve()?),
        Command::All(f) => commands::all(&f.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
