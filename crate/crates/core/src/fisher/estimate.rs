use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Batch, Binding, Example, GradMode, TransformerModel};
use crate::peft::PeftModule;
use crate::util::config_hash;

/// Per-coordinate empirical Fisher information over θ̃.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    pub scores: Vec<f32>,
    pub num_samples: usize,
    /// Digest of the configuration the scores were computed under.
    pub source_config_hash: String,
}

impl FisherEstimate {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Gradient of `log p(label | tokens)` with respect to θ̃, from a batch-of-one pass.
pub fn log_likelihood_grad(model: &TransformerModel, peft: &PeftModule, example: &Example) -> Result<Vec<f32>> {
    let batch = Batch::from_examples([example])?;
    let mut g = Graph::new();
    let bind = Binding::new(&mut g, model, Some(peft), GradMode::THETA);
    let logits = model.forward(&mut g, &bind, Some(peft), &batch)?;
    let nll = g.log_softmax_nll(logits, &batch.labels)?;
    g.backward(nll)?;
    // ∇ log p = −∇ nll; the sign vanishes once squared.
    Ok(bind.theta_grad(&g).into_iter().map(|v| -v).collect())
}

/// Picks `n` examples in a way that depends only on the set of examples, not their order.
pub fn canonical_subset(samples: &[Example], n: usize) -> Vec<&Example> {
    let mut sorted: Vec<&Example> = samples.iter().collect();
    sorted.sort();
    let len = sorted.len();
    (0..n).map(|i| sorted[i * len / n]).collect()
}

/// Mean of `g ⊙ g` over `samples`, where `grad` returns the log-likelihood gradient of
/// one sample. Gradients run in parallel; the sum is taken in f64 in sample order.
pub fn empirical_fisher<S, F>(samples: &[S], len: usize, grad: F) -> Result<Vec<f32>>
where
    S: Sync,
    F: Fn(&S) -> Result<Vec<f32>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::config("Fisher sample count must be positive"));
    }
    let squared: Vec<Vec<f32>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let g = grad(s)?;
            if g.len() != len {
                return Err(Error::contract(format!(
                    "Fisher sample {i} has {} gradient coordinates, expected {len}",
                    g.len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient at coordinate {j} for Fisher sample {i}"
                )));
            }
            Ok(g.into_iter().map(|v| v * v).collect())
        })
        .collect::<Result<_>>()?;

    let mut acc = vec![0.0f64; len];
    for sq in &squared {
        acc.iter_mut().zip(sq).for_each(|(a, &v)| *a += v as f64);
    }
    let n = samples.len() as f64;
    Ok(acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Empirical Fisher `(1/N) Σᵢ gᵢ ⊙ gᵢ` with `gᵢ = ∇_θ̃ log p(yᵢ | xᵢ)` on true labels.
///
/// Samples are drawn by [`canonical_subset`] and reduced in that canonical order,
/// so the result is independent of the order of `samples` and of thread count.
pub fn estimate_fisher(
    model: &TransformerModel,
    peft: &PeftModule,
    samples: &[Example],
    n: usize,
) -> Result<FisherEstimate> {
    if n == 0 {
        return Err(Error::config("Fisher sample count must be positive"));
    }
    if n > samples.len() {
        return Err(Error::config(format!(
            "requested {n} Fisher samples but only {} are available",
            samples.len()
        )));
    }
    let chosen = canonical_subset(samples, n);
    let scores = empirical_fisher(&chosen, peft.theta_len(), |ex| log_likelihood_grad(model, peft, ex))?;
    Ok(FisherEstimate {
        scores,
        num_samples: n,
        source_config_hash: config_hash(&(peft.model_config(), peft.config())),
    })
}
