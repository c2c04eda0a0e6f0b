//! Finite-difference Fisher oracles.

use fishtune::autodiff::{finite_diff_grad, relative_error};
use fishtune::fisher::{canonical_subset, empirical_fisher, estimate_fisher};
use fishtune::model::{build_model, generate_task, Batch, Example, TaskConfig, TransformerModel};
use fishtune::peft::{attach, Method, PeftConfig, PeftModule};
use fishtune::{Graph, Tensor};

use super::{parity_task, peft_all_layers, perturb_theta, randomize_model, tiny_model_config, FD_STEP};

pub fn log_prob(model: &TransformerModel, peft: &PeftModule, ex: &Example) -> fishtune::Result<f64> {
    let batch = Batch::from_examples([ex])?;
    let logits = model.logits(Some(peft), &batch)?;
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z[ex.label] - lse)
}

/// Samples for a logistic model over features `[x, 1]`.
const LOGISTIC: [(f32, usize); 3] = [(0.7, 1), (-1.3, 0), (2.1, 1)];

fn logistic_grad(theta: &[f32; 2], x: f32, y: usize) -> fishtune::Result<Vec<f32>> {
    let mut g = Graph::new();
    let w = g.param(Tensor::matrix(2, 1, theta.to_vec()));
    let feats = g.constant(Tensor::row(vec![x, 1.0]));
    let z = g.matmul(feats, w)?;
    let zero = g.constant(Tensor::zeros(1, 1));
    let logits = g.concat_cols(&[zero, z])?;
    let nll = g.log_softmax_nll(logits, &[y])?;
    g.backward(nll)?;
    Ok(g.grad(w).unwrap().iter().map(|v| -v).collect())
}

/// Relative error of the estimator against a finite-difference Fisher for a
/// 2-parameter logistic model.
pub fn logistic_fisher_error() -> f64 {
    let theta = [0.4f32, -0.2];
    let fisher = empirical_fisher(&LOGISTIC, 2, |&(x, y)| logistic_grad(&theta, x, y)).unwrap();

    let mut oracle = [0.0f64; 2];
    for &(x, y) in &LOGISTIC {
        let g = finite_diff_grad(
            |t| {
                let z = t.data()[0] as f64 * x as f64 + t.data()[1] as f64;
                let p1 = 1.0 / (1.0 + (-z).exp());
                Ok(if y == 1 { p1.ln() } else { (1.0 - p1).ln() })
            },
            &Tensor::row(theta.to_vec()),
            FD_STEP,
        )
        .unwrap();
        for (o, &v) in oracle.iter_mut().zip(g.data()) {
            *o += (v as f64).powi(2) / 3.0;
        }
    }
    let oracle: Vec<f32> = oracle.iter().map(|&v| v as f32).collect();
    relative_error(&fisher, &oracle)
}

pub fn lora_fixture(seed: u64) -> (TransformerModel, PeftModule, Vec<Example>) {
    let cfg = tiny_model_config(seed);
    let mut model = build_model(&cfg).unwrap();
    randomize_model(&mut model, seed, 0.3);
    let pc = PeftConfig { rank: 2, ..peft_all_layers(Method::Lora, &cfg) };
    let mut peft = attach(&mut model, &pc).unwrap();
    perturb_theta(&mut peft, seed + 1, 0.3);
    let task = generate_task(&TaskConfig {
        vocab_size: cfg.vocab_size,
        size: 64,
        ..parity_task(seed)
    })
    .unwrap();
    (model, peft, task.train.examples)
}

/// Relative error of [`estimate_fisher`] against per-sample finite-difference
/// gradients, squared and averaged, on a randomized 1-layer d=8 LoRA model.
pub fn lora_fisher_error(seed: u64) -> f64 {
    let (model, peft, samples) = lora_fixture(seed);
    let n = 6;
    let est = estimate_fisher(&model, &peft, &samples, n).unwrap();
    assert_eq!(est.len(), peft.theta_len());

    let mut oracle = vec![0.0f64; peft.theta_len()];
    for ex in canonical_subset(&samples, n) {
        let g = finite_diff_grad(
            |t| {
                let mut q = peft.clone();
                q.theta_mut().copy_from_slice(t.data());
                log_prob(&model, &q, ex)
            },
            &Tensor::row(peft.theta().to_vec()),
            FD_STEP,
        )
        .unwrap();
        for (o, &v) in oracle.iter_mut().zip(g.data()) {
            *o += (v as f64).powi(2) / n as f64;
        }
    }
    let oracle: Vec<f32> = oracle.iter().map(|&v| v as f32).collect();
    relative_error(&est.scores, &oracle)
}
