use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::PeftModule;

/// How the k kept coordinates of θ̃ are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Top-k Fisher scores.
    Fish,
    /// Uniform k-subset from a seeded generator.
    Random,
    /// Bottom-k Fisher scores.
    Reverse,
    /// Every coordinate.
    Dense,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Fish, Strategy::Random, Strategy::Reverse, Strategy::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fish => "fish",
            Strategy::Random => "random",
            Strategy::Reverse => "reverse",
            Strategy::Dense => "dense",
        }
    }

    pub fn uses_scores(self) -> bool {
        matches!(self, Strategy::Fish | Strategy::Reverse)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?} (expected fish, random, reverse or dense)")))
    }
}

/// Binary keep/drop vector over θ̃ with exactly `k` kept coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    bits: Vec<bool>,
    k: usize,
    strategy: Strategy,
    seed: u64,
}

impl SparsityMask {
    pub fn from_bits(bits: Vec<bool>, strategy: Strategy, seed: u64) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::contract("mask must cover at least one coordinate"));
        }
        let k = bits.iter().filter(|&&b| b).count();
        Ok(SparsityMask { bits, k, strategy, seed })
    }

    pub fn dense(len: usize) -> Result<Self> {
        SparsityMask::from_bits(vec![true; len], Strategy::Dense, 0)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_dense(&self) -> bool {
        self.k == self.bits.len()
    }

    /// Kept coordinates in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Zeroes masked-out entries of `grads` in place; kept entries are untouched.
    pub fn apply(&self, grads: &mut [f32]) -> Result<()> {
        if grads.len() != self.bits.len() {
            return Err(Error::contract(format!(
                "gradient length {} does not match mask length {}",
                grads.len(),
                self.bits.len()
            )));
        }
        for (g, &keep) in grads.iter_mut().zip(&self.bits) {
            if !keep {
                *g = 0.0;
            }
        }
        Ok(())
    }
}

/// Returns `grads ⊙ mask`.
pub fn mask_gradients(grads: &[f32], mask: &SparsityMask) -> Result<Vec<f32>> {
    let mut out = grads.to_vec();
    mask.apply(&mut out)?;
    Ok(out)
}

/// Number of kept coordinates for a fraction `ratio2` of a θ̃ of length `len`.
pub fn k_for_ratio(len: usize, ratio2: f64) -> Result<usize> {
    if len == 0 {
        return Err(Error::contract("θ̃ is empty"));
    }
    if !(ratio2 > 0.0 && ratio2 <= 1.0) {
        return Err(Error::config(format!("budget ratio must lie in (0, 1], got {ratio2}")));
    }
    Ok(((ratio2 * len as f64).round() as usize).clamp(1, len))
}

pub fn budget_to_k(peft: &PeftModule, ratio2: f64) -> Result<usize> {
    k_for_ratio(peft.theta_len(), ratio2)
}

/// Chooses `k` coordinates of a θ̃ scored by `scores`.
///
/// Fisher ties are broken by ascending index in both directions. `seed` only
/// affects the random strategy but is recorded on every mask.
pub fn select(scores: &[f32], k: usize, strategy: Strategy, seed: u64) -> Result<SparsityMask> {
    let len = scores.len();
    if len == 0 {
        return Err(Error::contract("cannot select from an empty score vector"));
    }
    if strategy == Strategy::Dense {
        if k != len {
            return Err(Error::config(format!("dense selection keeps all {len} coordinates, got k = {k}")));
        }
    } else if k == 0 || k > len {
        return Err(Error::config(format!("k must lie in [1, {len}], got {k}")));
    }
    if strategy.uses_scores() {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::numeric(format!("Fisher score at coordinate {i} is {}", scores[i])));
        }
    }

    let chosen: Vec<usize> = match strategy {
        Strategy::Dense => (0..len).collect(),
        Strategy::Fish | Strategy::Reverse => {
            let mut order: Vec<usize> = (0..len).collect();
            let descending = strategy == Strategy::Fish;
            order.sort_by(|&a, &b| {
                let by_score = scores[a].total_cmp(&scores[b]);
                let by_score = if descending { by_score.reverse() } else { by_score };
                by_score.then(a.cmp(&b))
            });
            order.truncate(k);
            order
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, len, k).into_vec()
        }
    };

    let mut bits = vec![false; len];
    for i in chosen {
        bits[i] = true;
    }
    Ok(SparsityMask { bits, k, strategy, seed })
}
