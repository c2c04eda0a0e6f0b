#![allow(dead_code)]

pub mod oracles;
pub mod primitives;

use fishtune::autodiff::{finite_diff_grad, relative_error};
use fishtune::model::{build_model, Batch, Example, ModelConfig, TaskConfig, TransformerModel};
use fishtune::peft::{attach, Method, PeftConfig, PeftModule};
use fishtune::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values in ±[lo, hi], kept away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn weighted(out: &Tensor, weights: &Tensor) -> f64 {
    out.data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Compares backward gradients of `Σ wᵢⱼ·out(inputs)ᵢⱼ` for random weights `w`
/// against central differences, for every input. Returns the worst relative error.
///
/// Weights have magnitude in [0.5, 1.5] and random sign. The difference quotient
/// resolves gradients only down to about `f32::EPSILON·|out|/step`, so weights near
/// zero would bury real gradients in rounding noise.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_with(build, inputs, seed, false)
}

/// Like [`gradcheck`] with all-positive weights, for inputs whose gradient sums
/// over many outputs and would otherwise cancel toward zero.
pub fn gradcheck_positive<F>(build: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_with(build, inputs, seed, true)
}

fn gradcheck_with<F>(build: F, inputs: &[Tensor], seed: u64, positive: bool) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let shape = g.value(out).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let weights = if positive {
        uniform(&mut r, shape[0], shape[1], 0.5, 1.5)
    } else {
        away_from_zero(&mut r, shape[0], shape[1], 0.5, 1.5)
    };
    let w = g.constant(weights.clone());
    let prod = g.hadamard(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let mut h = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| h.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let o = build(&mut h, &vs)?;
                Ok(weighted(h.value(o), &weights))
            },
            input,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(relative_error(&analytic, numeric.data()));
    }
    worst
}

/// A 1-layer, d=8 model used for exhaustive gradient checks.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 6,
        max_seq_len: 4,
        num_classes: 2,
        seed,
    }
}

pub fn small_model_config(seed: u64) -> ModelConfig {
    ModelConfig { seed, ..ModelConfig::default() }
}

pub fn parity_task(seed: u64) -> TaskConfig {
    TaskConfig { seed, ..TaskConfig::default() }
}

pub fn random_batch(cfg: &ModelConfig, rows: usize, seq: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let examples: Vec<Example> = (0..rows)
        .map(|_| Example {
            tokens: (0..seq).map(|_| r.random_range(0..cfg.vocab_size)).collect(),
            label: r.random_range(0..cfg.num_classes),
        })
        .collect();
    Batch::from_examples(&examples).unwrap()
}

pub fn attached(cfg: &ModelConfig, peft: &PeftConfig) -> (TransformerModel, PeftModule) {
    let mut model = build_model(cfg).unwrap();
    let p = attach(&mut model, peft).unwrap();
    (model, p)
}

/// Adapter config covering every layer of `cfg`.
pub fn peft_all_layers(method: Method, cfg: &ModelConfig) -> PeftConfig {
    PeftConfig::for_method(method).with_top_layers(cfg.num_layers)
}

/// Fills θ̃ with small random values so no factor sits at an exact zero.
pub fn perturb_theta(peft: &mut PeftModule, seed: u64, std: f32) {
    let mut r = rng(seed);
    let noise = Tensor::randn(1, peft.theta_len(), std, &mut r);
    for (v, n) in peft.theta_mut().iter_mut().zip(noise.data()) {
        *v += n;
    }
}

/// Replaces every model weight with N(0, std) noise (gains get 1 + noise), so gradient
/// checks are not dominated by the tiny init scale.
pub fn randomize_model(model: &mut TransformerModel, seed: u64, std: f32) {
    let mut r = rng(seed);
    for (name, t) in model.named_parameters_mut() {
        let noise = Tensor::randn(t.rows(), t.cols(), std, &mut r);
        let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = base + n;
        }
    }
}

fn weighted_logits(model: &TransformerModel, peft: Option<&PeftModule>, batch: &Batch, w: &Tensor) -> Result<f64> {
    Ok(weighted(&model.logits(peft, batch)?, w))
}

/// Analytic and finite-difference gradients of one tensor.
pub struct TensorCheck {
    pub name: String,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
}

impl TensorCheck {
    pub fn relative_error(&self) -> f64 {
        relative_error(&self.analytic, &self.numeric)
    }
}

/// Norm-wise relative error of the concatenation of every checked tensor.
///
/// A full forward in f32 leaves roughly 1e-4 of rounding noise per coordinate in a
/// step-1e-3 difference quotient, so single tensors with small gradients (keys under
/// near-uniform attention, adapters behind dead ReLUs) cannot be resolved on their own.
pub fn overall_error(checks: &[TensorCheck]) -> f64 {
    let a: Vec<f32> = checks.iter().flat_map(|c| c.analytic.iter().copied()).collect();
    let n: Vec<f32> = checks.iter().flat_map(|c| c.numeric.iter().copied()).collect();
    relative_error(&a, &n)
}

/// Finite-difference check of `Σ w ⊙ logits` against backward for every base tensor,
/// every θ̃ segment and every auxiliary segment.
pub fn model_gradcheck(
    model: &TransformerModel,
    peft: Option<&PeftModule>,
    batch: &Batch,
    seed: u64,
) -> Vec<TensorCheck> {
    let mut r = rng(seed);
    let weights = away_from_zero(&mut r, batch.len(), model.config.num_classes, 0.5, 1.5);
    let mut g = Graph::new();
    let bind = fishtune::model::Binding::new(&mut g, model, peft, fishtune::model::GradMode::ALL);
    let logits = model.forward(&mut g, &bind, peft, batch).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.hadamard(logits, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut out = Vec::new();
    let vars = bind.model_vars();
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    for (idx, (name, var)) in names.iter().zip(&vars).enumerate() {
        let analytic = g.grad(*var).unwrap().to_vec();
        let base = model.named_parameters()[idx].1.clone();
        let numeric = finite_diff_grad(
            |probe| {
                let mut m = model.clone();
                *m.named_parameters_mut()[idx].1 = probe.clone();
                weighted_logits(&m, peft, batch, &weights)
            },
            &base,
            FD_STEP,
        )
        .unwrap();
        out.push(TensorCheck {
            name: name.clone(),
            analytic,
            numeric: numeric.into_data(),
        });
    }

    if let Some(p) = peft {
        let theta_grad = bind.theta_grad(&g);
        let aux_grad = bind.aux_grad(&g);
        let groups = [(p.segments(), &theta_grad, false), (p.aux_segments(), &aux_grad, true)];
        for (segments, grads, is_aux) in groups {
            for seg in segments {
                let range = seg.range();
                let current = Tensor::row(if is_aux { p.aux() } else { p.theta() }[range.clone()].to_vec());
                let numeric = finite_diff_grad(
                    |probe| {
                        let mut q = p.clone();
                        let dst = if is_aux { q.aux_mut() } else { q.theta_mut() };
                        dst[range.clone()].copy_from_slice(probe.data());
                        weighted_logits(model, Some(&q), batch, &weights)
                    },
                    &current,
                    FD_STEP,
                )
                .unwrap();
                out.push(TensorCheck {
                    name: seg.name(),
                    analytic: grads[range].to_vec(),
                    numeric: numeric.into_data(),
                });
            }
        }
    }
    out
}

/// The parity baseline: 2-layer d=32 model, LoRA r=4 on Q/K/V of both layers,
/// AdamW at 1e-2 for 30 epochs without early stopping. Task data stay fixed
/// across `seed`; model, adapter and data order follow it.
pub struct ParitySetup {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub peft: PeftConfig,
    pub train: fishtune::train::TrainConfig,
}

pub fn parity_setup(seed: u64) -> ParitySetup {
    let task = TaskConfig::default();
    let model = ModelConfig {
        max_seq_len: task.seq_len,
        seed,
        ..ModelConfig::default()
    };
    let peft = PeftConfig {
        rank: 4,
        seed,
        ..peft_all_layers(Method::Lora, &model)
    };
    let train = fishtune::train::TrainConfig {
        lr: 1e-2,
        epochs: 30,
        early_stopping_patience: None,
        seed,
        ..Default::default()
    };
    ParitySetup { model, task, peft, train }
}
