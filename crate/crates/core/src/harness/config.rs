use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{Strategy, DEFAULT_FISHER_SAMPLES};
use crate::model::{ModelConfig, TaskConfig};
use crate::peft::PeftConfig;
use crate::train::TrainConfig;
use crate::util::config_hash;

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// Everything needed to reproduce one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub peft: PeftConfig,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Fraction of θ̃ to keep. Ignored when `k` is set.
    #[serde(default)]
    pub budget: Option<f64>,
    /// Explicit number of kept coordinates.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_strategy() -> Strategy {
    Strategy::Fish
}

fn default_fisher_samples() -> usize {
    DEFAULT_FISHER_SAMPLES
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            peft: PeftConfig::default(),
            strategy: default_strategy(),
            budget: Some(0.01),
            k: None,
            fisher_samples: DEFAULT_FISHER_SAMPLES,
            train: TrainConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("cannot parse experiment config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("experiment config serializes infallibly")
    }

    /// Digest of everything that affects results (the output directory is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        config_hash(&c)
    }

    /// Sets every seed that varies between repeated runs. The task stays fixed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.peft.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.task.validate()?;
        self.peft.validate(&self.model)?;
        self.train.validate()?;
        let (m, t) = (&self.model, &self.task);
        if t.seq_len > m.max_seq_len {
            return Err(Error::config(format!("task seq_len {} exceeds model max_seq_len {}", t.seq_len, m.max_seq_len)));
        }
        if t.vocab_size > m.vocab_size {
            return Err(Error::config(format!("task vocab {} exceeds model vocab {}", t.vocab_size, m.vocab_size)));
        }
        if t.num_classes != m.num_classes {
            return Err(Error::config(format!("task has {} classes, model has {}", t.num_classes, m.num_classes)));
        }
        if self.k.is_none() && self.strategy != Strategy::Dense {
            match self.budget {
                None => return Err(Error::config("either budget or k must be set")),
                Some(b) if !(b > 0.0 && b <= 1.0) => {
                    return Err(Error::config(format!("budget must lie in (0, 1], got {b}")))
                }
                _ => {}
            }
        }
        if self.k == Some(0) {
            return Err(Error::config("k must be positive"));
        }
        if self.strategy.uses_scores() && self.fisher_samples == 0 {
            return Err(Error::config("fisher_samples must be positive"));
        }
        Ok(())
    }
}
