//! Shared fixtures for the criterion benchmarks.

use fishtune::model::{build_model, generate_task, ModelConfig, Task, TaskConfig, TransformerModel};
use fishtune::peft::{attach, Method, PeftConfig, PeftModule};
use fishtune::Tensor;

/// Deterministic dense matrix with entries in [-1, 1].
pub fn matrix(rows: usize, cols: usize, salt: f32) -> Tensor {
    let data = (0..rows * cols).map(|i| (i as f32 * 0.618 + salt).sin()).collect();
    Tensor::matrix(rows, cols, data)
}

pub struct Fixture {
    pub model: TransformerModel,
    pub peft: PeftModule,
    pub task: Task,
}

/// Default-sized model with `method` attached to every layer, plus a parity task.
pub fn fixture(method: Method) -> Fixture {
    let task_cfg = TaskConfig { size: 256, ..TaskConfig::default() };
    let model_cfg = ModelConfig { max_seq_len: task_cfg.seq_len, ..ModelConfig::default() };
    let mut model = build_model(&model_cfg).expect("default model config is valid");
    let peft_cfg = PeftConfig::for_method(method).with_top_layers(model_cfg.num_layers);
    let peft = attach(&mut model, &peft_cfg).expect("adapter attaches");
    let task = generate_task(&task_cfg).expect("default task config is valid");
    Fixture { model, peft, task }
}

/// Scores with a spread of magnitudes and some exact ties.
pub fn scores(len: usize) -> Vec<f32> {
    (0..len).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect()
}
