use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::fisher::{SparsityMask, Strategy};
use crate::model::{Batch, Binding, Dataset, Example, GradMode, Task, TransformerModel};
use crate::peft::PeftModule;
use crate::util::config_hash;

use super::optim::{step, OptimizerKind, OptimizerState};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a new best eval loss.
    pub early_stopping_patience: Option<usize>,
    /// Whether the classifier head is trained alongside θ̃.
    pub train_head: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 30,
            early_stopping_patience: Some(10),
            train_head: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.early_stopping_patience == Some(0) {
            return Err(Error::config("early stopping patience must be positive when set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the state before any update.
    pub records: Vec<EpochRecord>,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: f64,
    pub ratio1: f64,
    pub ratio2: f64,
    pub k: usize,
    pub theta_len: usize,
    pub strategy: Option<Strategy>,
    pub steps: u64,
    pub stopped_early: bool,
    /// Set when training aborted on a non-finite loss or update.
    pub diverged: Option<String>,
    pub wall_time_seconds: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl TrainReport {
    /// Equality of the metric trajectory and run outcome, ignoring provenance
    /// (hash, strategy label) and wall-clock time.
    pub fn same_metrics(&self, other: &TrainReport) -> bool {
        self.records == other.records
            && self.final_eval_loss.to_bits() == other.final_eval_loss.to_bits()
            && self.final_eval_accuracy.to_bits() == other.final_eval_accuracy.to_bits()
            && self.steps == other.steps
            && self.stopped_early == other.stopped_early
            && self.diverged == other.diverged
    }

    pub fn eval_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.eval_loss).collect()
    }
}

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class).
pub fn metrics_from_logits(logits: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let (rows, cols) = logits.dims2()?;
    if rows != labels.len() || rows == 0 {
        return Err(Error::contract(format!("{rows} logit rows for {} labels", labels.len())));
    }
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[y] as f64;
        let arg = (0..cols).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        correct += (arg == y) as usize;
    }
    Ok((loss / rows as f64, correct as f64 / rows as f64))
}

/// Mean cross-entropy and accuracy over a dataset.
pub fn evaluate(model: &TransformerModel, peft: Option<&PeftModule>, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let (mut loss, mut acc) = (0.0f64, 0.0f64);
    for batch in data.batches(EVAL_BATCH)? {
        let (l, a) = metrics_from_logits(&model.logits(peft, &batch)?, &batch.labels)?;
        loss += l * batch.len() as f64;
        acc += a * batch.len() as f64;
    }
    let n = data.len() as f64;
    Ok((loss / n, acc / n))
}

/// Total parameters counted by ratio1: base model with head, θ̃ and any gates kept outside θ̃.
pub fn total_parameters(model: &TransformerModel, peft: &PeftModule) -> usize {
    model.parameter_count() + peft.theta_len() + peft.aux().len()
}

/// `(ratio1, ratio2)`: kept coordinates over all parameters and over θ̃.
pub fn compute_ratios(model: &TransformerModel, peft: &PeftModule, mask: &SparsityMask) -> Result<(f64, f64)> {
    if mask.len() != peft.theta_len() {
        return Err(Error::contract(format!(
            "mask covers {} coordinates but θ̃ has {}",
            mask.len(),
            peft.theta_len()
        )));
    }
    let k = mask.k() as f64;
    Ok((k / total_parameters(model, peft) as f64, k / peft.theta_len() as f64))
}

/// Step-level training driver: masked θ̃ updates plus unmasked head and gate updates.
pub struct Trainer<'a> {
    model: &'a mut TransformerModel,
    peft: &'a mut PeftModule,
    mask: Option<&'a SparsityMask>,
    cfg: TrainConfig,
    total_steps: u64,
    theta_opt: OptimizerState,
    head_opt: OptimizerState,
    aux_opt: OptimizerState,
}

impl<'a> Trainer<'a> {
    /// `total_steps` sets the horizon of the linear learning-rate decay.
    pub fn new(
        model: &'a mut TransformerModel,
        peft: &'a mut PeftModule,
        mask: Option<&'a SparsityMask>,
        cfg: &TrainConfig,
        total_steps: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(m) = mask {
            if m.len() != peft.theta_len() {
                return Err(Error::contract(format!(
                    "mask covers {} coordinates but θ̃ has {}",
                    m.len(),
                    peft.theta_len()
                )));
            }
        }
        let head_len = model.head_parameter_count();
        let opt = |len| OptimizerState::new(cfg.optimizer, len, cfg.lr, cfg.weight_decay);
        Ok(Trainer {
            theta_opt: opt(peft.theta_len())?,
            head_opt: opt(head_len)?,
            aux_opt: opt(peft.aux().len())?,
            model,
            peft,
            mask,
            cfg: cfg.clone(),
            total_steps: total_steps.max(1),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.theta_opt.step_count
    }

    pub fn theta_optimizer(&self) -> &OptimizerState {
        &self.theta_opt
    }

    pub fn model(&self) -> &TransformerModel {
        self.model
    }

    pub fn peft(&self) -> &PeftModule {
        self.peft
    }

    fn current_lr(&self) -> f32 {
        let t = self.theta_opt.step_count.min(self.total_steps - 1);
        (self.cfg.lr as f64 * (1.0 - t as f64 / self.total_steps as f64)) as f32
    }

    /// One forward/backward/update on `batch`, returning the batch loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let mode = GradMode { theta: true, head: self.cfg.train_head, base: false };
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, self.model, Some(self.peft), mode);
        let logits = self.model.forward(&mut g, &bind, Some(self.peft), batch)?;
        let loss_var = g.log_softmax_nll(logits, &batch.labels)?;
        let loss = g.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite training loss at step {}", self.steps_taken())));
        }
        g.backward(loss_var)?;

        let lr = self.current_lr();
        self.theta_opt.lr = lr;
        step(self.peft.theta_mut(), &bind.theta_grad(&g), self.mask, &mut self.theta_opt)?;
        if self.cfg.train_head {
            let (gw, gb) = bind.head_grads(&g);
            let nw = gw.len();
            let mut head: Vec<f32> = self.model.head_weight.data().to_vec();
            head.extend_from_slice(self.model.head_bias.data());
            let grads: Vec<f32> = gw.into_iter().chain(gb).collect();
            self.head_opt.lr = lr;
            step(&mut head, &grads, None, &mut self.head_opt)?;
            self.model.head_weight.data_mut().copy_from_slice(&head[..nw]);
            self.model.head_bias.data_mut().copy_from_slice(&head[nw..]);
            if !self.peft.aux().is_empty() {
                self.aux_opt.lr = lr;
                step(self.peft.aux_mut(), &bind.aux_grad(&g), None, &mut self.aux_opt)?;
            }
        }
        Ok(loss)
    }
}

fn run_hash(model: &TransformerModel, peft: &PeftModule, mask: Option<&SparsityMask>, cfg: &TrainConfig) -> String {
    let mask_id = mask.map(|m| (m.strategy(), m.k(), m.seed()));
    config_hash(&(&model.config, peft.config(), cfg, mask_id))
}

/// Minibatch training with linear learning-rate decay and optional early stopping.
///
/// Data order comes from a shuffle seeded by `cfg.seed`, so identical inputs
/// give identical reports apart from wall time.
pub fn train(
    model: &mut TransformerModel,
    peft: &mut PeftModule,
    mask: Option<&SparsityMask>,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if task.train.is_empty() || task.eval.is_empty() {
        return Err(Error::contract("training needs nonempty train and eval splits"));
    }
    let start = Instant::now();
    let dense;
    let ratio_mask = match mask {
        Some(m) => m,
        None => {
            dense = SparsityMask::dense(peft.theta_len())?;
            &dense
        }
    };
    let (ratio1, ratio2) = compute_ratios(model, peft, ratio_mask)?;
    let config_hash = run_hash(model, peft, mask, cfg);

    let init_train = evaluate(model, Some(peft), &task.train)?.0;
    let (init_loss, init_acc) = evaluate(model, Some(peft), &task.eval)?;
    let mut records = vec![EpochRecord { epoch: 0, train_loss: init_train, eval_loss: init_loss, eval_accuracy: init_acc }];

    let per_epoch = task.train.len().div_ceil(cfg.batch_size) as u64;
    let mut trainer = Trainer::new(model, peft, mask, cfg, per_epoch * cfg.epochs as u64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let (mut best, mut since_best) = (init_loss, 0usize);
    let (mut stopped_early, mut diverged) = (false, None);

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &task.train.examples[i]).collect();
            let batch = Batch::from_examples(examples)?;
            match trainer.train_step(&batch) {
                Ok(loss) => sum += loss * batch.len() as f64,
                Err(Error::Numeric(msg)) => {
                    diverged = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (eval_loss, eval_accuracy) = evaluate(trainer.model(), Some(trainer.peft()), &task.eval)?;
        records.push(EpochRecord { epoch, train_loss: sum / task.train.len() as f64, eval_loss, eval_accuracy });
        if eval_loss < best {
            best = eval_loss;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.early_stopping_patience.is_some_and(|p| since_best >= p) {
            stopped_early = true;
            break;
        }
    }

    let steps = trainer.steps_taken();
    let last = records.last().expect("epoch 0 is always recorded");
    Ok(TrainReport {
        final_eval_loss: last.eval_loss,
        final_eval_accuracy: last.eval_accuracy,
        records,
        ratio1,
        ratio2,
        k: ratio_mask.k(),
        theta_len: ratio_mask.len(),
        strategy: mask.map(|m| m.strategy()),
        steps,
        stopped_early,
        diverged,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        config_hash,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_logits_score_full_accuracy() {
        let logits = Tensor::matrix(3, 2, vec![5.0, -5.0, -5.0, 5.0, 5.0, -5.0]);
        let (loss, acc) = metrics_from_logits(&logits, &[0, 1, 0]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(loss < 1e-4);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::zeros(4, 2);
        let (loss, acc) = metrics_from_logits(&logits, &[0, 1, 0, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_validation());
        let bad = TrainConfig { lr: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
