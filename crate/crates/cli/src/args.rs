use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fishtune::fisher::Strategy;
use fishtune::harness::ExperimentConfig;
use fishtune::peft::Method;
use fishtune::Result;

#[derive(Debug, Parser)]
#[command(name = "fishtune", version, about = "Fisher-guided sparse fine-tuning of adapter modules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task and write train/eval splits.
    GenData(Common),
    /// Estimate Fisher scores over θ̃ and write them.
    Fisher(Common),
    /// Select a sparsity mask and write it.
    Mask(MaskArgs),
    /// Run the full pipeline and write report, metrics, mask and checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the task's eval split.
    Eval(EvalArgs),
    /// Sweep strategies × budgets × seeds and write a comparison table.
    Compare(CompareArgs),
    /// Render tables from stored report and comparison files.
    Report(ReportArgs),
}

/// Flags shared by every experiment command; they override config-file values.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Fraction of θ̃ to keep, in (0, 1].
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    /// Number of top layers that receive adapters.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fisher score file to select from instead of estimating afresh.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "fish,random,reverse")]
    pub strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.25,0.5")]
    pub budgets: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "42")]
    pub seeds: Vec<u64>,
    /// Instead of a sweep, pair a dense adapter on `--layers` top layers with a
    /// masked one on this many more layers at a matched parameter share.
    #[arg(long)]
    pub pair_extra_layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files or directories to scan.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Write the rendered report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.peft.method = m;
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(b) = self.budget {
            cfg.budget = Some(b);
            cfg.k = None;
        }
        if let Some(r) = self.rank {
            cfg.peft.rank = r;
        }
        if let Some(l) = self.prefix_len {
            cfg.peft.prefix_len = l;
        }
        if let Some(n) = self.layers {
            cfg.peft = cfg.peft.with_top_layers(n);
        }
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
