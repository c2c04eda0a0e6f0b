//! Tiny transformer encoder classifier and the synthetic tasks it is tuned on.

mod data;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use data::{generate_task, label_for, Batch, Dataset, Example, Task, TaskConfig, TaskKind};
pub use forward::{Binding, ForwardOutput, GradMode, LayerVars};

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 16,
            max_seq_len: 8,
            num_classes: 2,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model {name} must be at least 1")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Parameter count implied by the architecture, classifier head included.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim;
        let per_layer = 4 * d * d + 2 * (2 * d) + d * f + f + f * d + d;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.num_layers * per_layer
            + 2 * d
            + d * self.num_classes
            + self.num_classes
    }

    /// Maps a top-counted layer index (0 = nearest the output) to a depth index.
    pub fn layer_from_top(&self, top_index: usize) -> Result<usize> {
        if top_index >= self.num_layers {
            return Err(Error::config(format!(
                "layer {top_index} (counted from the top) exceeds model depth {}",
                self.num_layers
            )));
        }
        Ok(self.num_layers - 1 - top_index)
    }
}

/// Gain and bias of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(d: usize) -> Self {
        Norm {
            gain: Tensor::ones(1, d),
            bias: Tensor::zeros(1, d),
        }
    }
}

/// Frozen weights of one encoder block. Projections map row vectors: `y = x·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Norm,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_norm: Norm,
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
}

/// Which projection of a block a weight-level adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::FfnIn,
        Projection::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "w_q",
            Projection::Key => "w_k",
            Projection::Value => "w_v",
            Projection::Output => "w_o",
            Projection::FfnIn => "ffn_in",
            Projection::FfnOut => "ffn_out",
        }
    }
}

impl LayerWeights {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Query => &self.w_q,
            Projection::Key => &self.w_k,
            Projection::Value => &self.w_v,
            Projection::Output => &self.w_o,
            Projection::FfnIn => &self.ffn_in,
            Projection::FfnOut => &self.ffn_out,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Query => &mut self.w_q,
            Projection::Key => &mut self.w_k,
            Projection::Value => &mut self.w_v,
            Projection::Output => &mut self.w_o,
            Projection::FfnIn => &mut self.ffn_in,
            Projection::FfnOut => &mut self.ffn_out,
        }
    }
}

/// Pre-norm transformer encoder with learned absolute positions, mean pooling
/// and a linear classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Norm,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    frozen: bool,
}

/// Builds a model with seeded `N(0, 0.02²)` weights, zero biases and unit norm gains.
pub fn build_model(cfg: &ModelConfig) -> Result<TransformerModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let token_embedding = Tensor::randn(cfg.vocab_size, d, INIT_STD, &mut rng);
    let position_embedding = Tensor::randn(cfg.max_seq_len, d, INIT_STD, &mut rng);
    let layers = (0..cfg.num_layers)
        .map(|_| LayerWeights {
            attn_norm: Norm::new(d),
            w_q: Tensor::randn(d, d, INIT_STD, &mut rng),
            w_k: Tensor::randn(d, d, INIT_STD, &mut rng),
            w_v: Tensor::randn(d, d, INIT_STD, &mut rng),
            w_o: Tensor::randn(d, d, INIT_STD, &mut rng),
            ffn_norm: Norm::new(d),
            ffn_in: Tensor::randn(d, f, INIT_STD, &mut rng),
            ffn_in_bias: Tensor::zeros(1, f),
            ffn_out: Tensor::randn(f, d, INIT_STD, &mut rng),
            ffn_out_bias: Tensor::zeros(1, d),
        })
        .collect();
    let head_weight = Tensor::randn(d, cfg.num_classes, INIT_STD, &mut rng);
    Ok(TransformerModel {
        config: cfg.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_norm: Norm::new(d),
        head_weight,
        head_bias: Tensor::zeros(1, cfg.num_classes),
        frozen: false,
    })
}

impl TransformerModel {
    /// Whether base weights are frozen (true once an adapter is attached).
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn freeze(&mut self) {
        self.frozen = true;
    }

    /// All weights in a fixed order, classifier head last.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layers.{i}.{name}");
            out.extend([
                (p("attn_norm.gain"), &l.attn_norm.gain),
                (p("attn_norm.bias"), &l.attn_norm.bias),
                (p("w_q"), &l.w_q),
                (p("w_k"), &l.w_k),
                (p("w_v"), &l.w_v),
                (p("w_o"), &l.w_o),
                (p("ffn_norm.gain"), &l.ffn_norm.gain),
                (p("ffn_norm.bias"), &l.ffn_norm.bias),
                (p("ffn_in"), &l.ffn_in),
                (p("ffn_in_bias"), &l.ffn_in_bias),
                (p("ffn_out"), &l.ffn_out),
                (p("ffn_out_bias"), &l.ffn_out_bias),
            ]);
        }
        out.extend([
            ("final_norm.gain".into(), &self.final_norm.gain),
            ("final_norm.bias".into(), &self.final_norm.bias),
            ("head_weight".into(), &self.head_weight),
            ("head_bias".into(), &self.head_bias),
        ]);
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |name: &str| format!("layers.{i}.{name}");
            out.extend([
                (p("attn_norm.gain"), &mut l.attn_norm.gain),
                (p("attn_norm.bias"), &mut l.attn_norm.bias),
                (p("w_q"), &mut l.w_q),
                (p("w_k"), &mut l.w_k),
                (p("w_v"), &mut l.w_v),
                (p("w_o"), &mut l.w_o),
                (p("ffn_norm.gain"), &mut l.ffn_norm.gain),
                (p("ffn_norm.bias"), &mut l.ffn_norm.bias),
                (p("ffn_in"), &mut l.ffn_in),
                (p("ffn_in_bias"), &mut l.ffn_in_bias),
                (p("ffn_out"), &mut l.ffn_out),
                (p("ffn_out_bias"), &mut l.ffn_out_bias),
            ]);
        }
        out.extend([
            ("final_norm.gain".into(), &mut self.final_norm.gain),
            ("final_norm.bias".into(), &mut self.final_norm.bias),
            ("head_weight".into(), &mut self.head_weight),
            ("head_bias".into(), &mut self.head_bias),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head_weight.numel() + self.head_bias.numel()
    }

    /// Snapshot of every non-head weight, for frozen-base checks.
    pub fn base_snapshot(&self) -> Vec<(String, Tensor)> {
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("head_"))
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 16,
            max_seq_len: 8,
            num_classes: 2,
            seed: 42,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(&reference_config()).unwrap();
        let b = build_model(&reference_config()).unwrap();
        for ((_, x), (_, y)) in a.named_parameters().iter().zip(b.named_parameters()) {
            assert!(x.bitwise_eq(y));
        }
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // embeddings 16·32 + 8·32 = 768
        // per layer: 4·32·32 + 2·64 (norms) + 32·64 + 64 + 64·32 + 32 = 8416
        // final norm 64, head 32·2 + 2 = 66
        let model = build_model(&reference_config()).unwrap();
        assert_eq!(model.parameter_count(), 768 + 2 * 8416 + 64 + 66);
        assert_eq!(model.parameter_count(), reference_config().parameter_count());
    }

    #[test]
    fn seed_changes_weights() {
        let a = build_model(&reference_config()).unwrap();
        let b = build_model(&ModelConfig {
            seed: 43,
            ..reference_config()
        })
        .unwrap();
        assert!(!a.token_embedding.bitwise_eq(&b.token_embedding));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_heads = ModelConfig {
            num_heads: 5,
            ..reference_config()
        };
        assert!(matches!(build_model(&bad_heads), Err(Error::Config(_))));
        let zero = ModelConfig {
            vocab_size: 0,
            ..reference_config()
        };
        assert!(matches!(build_model(&zero), Err(Error::Config(_))));
    }

    #[test]
    fn top_counted_layers() {
        let cfg = reference_config();
        assert_eq!(cfg.layer_from_top(0).unwrap(), 1);
        assert_eq!(cfg.layer_from_top(1).unwrap(), 0);
        assert!(cfg.layer_from_top(2).is_err());
    }
}
