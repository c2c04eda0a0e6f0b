use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token positions whose bits are XOR-ed by the parity task.
pub const PARITY_POSITIONS: [usize; 2] = [0, 1];

fn default_parity_positions() -> Vec<usize> {
    PARITY_POSITIONS.to_vec()
}

/// Fraction of generated examples held out for evaluation.
const EVAL_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label is the XOR of `token % 2` at the designated positions.
    Parity,
    /// Label is the most frequent token class (`token % num_classes`), lowest class on ties.
    Majority,
    /// Label is the class of the first token.
    CopyClass,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Parity => "parity",
            TaskKind::Majority => "majority",
            TaskKind::CopyClass => "copy-class",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(TaskKind::Parity),
            "majority" => Ok(TaskKind::Majority),
            "copy-class" => Ok(TaskKind::CopyClass),
            other => Err(Error::config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Total number of distinct examples, train and eval together.
    pub size: usize,
    pub seed: u64,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Positions whose token parities are XORed by the parity task.
    #[serde(default = "default_parity_positions")]
    pub parity_positions: Vec<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Parity,
            size: 1024,
            seed: 42,
            seq_len: 4,
            vocab_size: 16,
            num_classes: 2,
            parity_positions: default_parity_positions(),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config(format!("task size must be at least 16, got {}", self.size)));
        }
        if self.seq_len == 0 || self.vocab_size < 2 || self.num_classes < 2 {
            return Err(Error::config("task needs seq_len ≥ 1, vocab_size ≥ 2 and num_classes ≥ 2"));
        }
        if self.vocab_size < self.num_classes {
            return Err(Error::config("vocab_size must be at least num_classes"));
        }
        match self.kind {
            TaskKind::Parity => {
                if self.num_classes != 2 {
                    return Err(Error::config("parity is a 2-class task"));
                }
                if self.parity_positions.is_empty() {
                    return Err(Error::config("parity needs at least one designated position"));
                }
                if let Some(p) = self.parity_positions.iter().find(|&&p| p >= self.seq_len) {
                    return Err(Error::config(format!(
                        "parity position {p} is outside seq_len {}",
                        self.seq_len
                    )));
                }
            }
            TaskKind::Majority | TaskKind::CopyClass => {}
        }
        let space = (self.vocab_size as f64).powi(self.seq_len as i32);
        if space < 2.0 * self.size as f64 {
            return Err(Error::config(format!(
                "{} distinct sequences requested from a space of {space}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Labels a token sequence for the given task.
pub fn label_for(kind: TaskKind, tokens: &[usize], num_classes: usize, parity_positions: &[usize]) -> usize {
    match kind {
        TaskKind::Parity => parity_positions.iter().fold(0, |acc, &p| acc ^ (tokens[p] % 2)),
        TaskKind::Majority => {
            let mut counts = vec![0usize; num_classes];
            for &t in tokens {
                counts[t % num_classes] += 1;
            }
            let best = *counts.iter().max().expect("num_classes >= 1");
            counts.iter().position(|&c| c == best).unwrap()
        }
        TaskKind::CopyClass => tokens[0] % num_classes,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// A rectangular minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// `[batch × seq_len]`, row-major.
    pub token_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Batch> {
        let mut token_ids = Vec::new();
        let mut labels = Vec::new();
        let mut seq_len = None;
        for ex in examples {
            match seq_len {
                None => seq_len = Some(ex.tokens.len()),
                Some(s) if s != ex.tokens.len() => {
                    return Err(Error::contract("examples in a batch must share a length"))
                }
                _ => {}
            }
            token_ids.extend_from_slice(&ex.tokens);
            labels.push(ex.label);
        }
        let seq_len = seq_len.ok_or_else(|| Error::contract("empty batch"))?;
        if seq_len == 0 {
            return Err(Error::contract("zero-length sequences"));
        }
        Ok(Batch {
            token_ids,
            labels,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Consecutive batches of at most `size` examples, in stored order.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        if size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        self.examples.chunks(size).map(Batch::from_examples).collect()
    }

    /// Fraction of examples carrying `label`.
    pub fn label_fraction(&self, label: usize) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples.iter().filter(|e| e.label == label).count() as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Draws `size` distinct sequences and splits them into disjoint train and eval sets.
pub fn generate_task(cfg: &TaskConfig) -> Result<Task> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::with_capacity(cfg.size);
    let mut examples = Vec::with_capacity(cfg.size);
    while examples.len() < cfg.size {
        let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let label = label_for(cfg.kind, &tokens, cfg.num_classes, &cfg.parity_positions);
        examples.push(Example { tokens, label });
    }
    let n_eval = ((cfg.size as f64 * EVAL_FRACTION).round() as usize).max(1);
    let eval = examples.split_off(cfg.size - n_eval);
    Ok(Task {
        train: Dataset { examples },
        eval: Dataset { examples: eval },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: TaskKind) -> TaskConfig {
        TaskConfig {
            kind,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn majority_of_constant_sequence() {
        assert_eq!(label_for(TaskKind::Majority, &[5; 8], 2, &PARITY_POSITIONS), 1);
        assert_eq!(label_for(TaskKind::Majority, &[6; 8], 4, &PARITY_POSITIONS), 2);
    }

    #[test]
    fn parity_and_copy_labels() {
        assert_eq!(label_for(TaskKind::Parity, &[1, 3, 0, 0], 2, &PARITY_POSITIONS), 0);
        assert_eq!(label_for(TaskKind::Parity, &[1, 2, 7, 7], 2, &PARITY_POSITIONS), 1);
        assert_eq!(label_for(TaskKind::CopyClass, &[7, 0, 0], 3, &PARITY_POSITIONS), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(&cfg(TaskKind::Majority)).unwrap();
        let b = generate_task(&cfg(TaskKind::Majority)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parity_is_balanced() {
        let task = generate_task(&cfg(TaskKind::Parity)).unwrap();
        let mut all = task.train.clone();
        all.examples.extend(task.eval.examples.iter().cloned());
        assert_eq!(all.len(), 1024);
        let frac = all.label_fraction(1);
        assert!((0.45..=0.55).contains(&frac), "{frac}");
    }

    #[test]
    fn train_and_eval_are_disjoint() {
        let task = generate_task(&cfg(TaskKind::CopyClass)).unwrap();
        let train: HashSet<_> = task.train.examples.iter().map(|e| &e.tokens).collect();
        assert!(task.eval.examples.iter().all(|e| !train.contains(&e.tokens)));
        assert_eq!(task.train.len() + task.eval.len(), 1024);
    }

    #[test]
    fn rejects_small_or_unknown() {
        let small = TaskConfig {
            size: 8,
            ..TaskConfig::default()
        };
        assert!(matches!(generate_task(&small), Err(Error::Config(_))));
        assert!(matches!("sorting".parse::<TaskKind>(), Err(Error::Config(_))));
    }
}
