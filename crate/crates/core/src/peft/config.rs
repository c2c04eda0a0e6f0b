use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Projection};

/// Longest key/value span (prefix plus sequence) attention accepts.
pub const POSITION_BUDGET: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Dora,
    Adapter,
    Prefix,
    Ia3,
    Unipelt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Lora,
        Method::Dora,
        Method::Adapter,
        Method::Prefix,
        Method::Ia3,
        Method::Unipelt,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lora => "lora",
            Method::Dora => "dora",
            Method::Adapter => "adapter",
            Method::Prefix => "prefix",
            Method::Ia3 => "ia3",
            Method::Unipelt => "unipelt",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown PEFT method `{s}`")))
    }
}

/// Weight groups a low-rank adapter may wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetWeight {
    #[serde(rename = "w_q")]
    Query,
    #[serde(rename = "w_k")]
    Key,
    #[serde(rename = "w_v")]
    Value,
    #[serde(rename = "w_o")]
    Output,
    /// Both feed-forward matrices.
    #[serde(rename = "ffn")]
    Ffn,
}

impl TargetWeight {
    pub fn projections(self) -> &'static [Projection] {
        match self {
            TargetWeight::Query => &[Projection::Query],
            TargetWeight::Key => &[Projection::Key],
            TargetWeight::Value => &[Projection::Value],
            TargetWeight::Output => &[Projection::Output],
            TargetWeight::Ffn => &[Projection::FfnIn, Projection::FfnOut],
        }
    }
}

impl FromStr for TargetWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w_q" | "q" => Ok(TargetWeight::Query),
            "w_k" | "k" => Ok(TargetWeight::Key),
            "w_v" | "v" => Ok(TargetWeight::Value),
            "w_o" | "o" => Ok(TargetWeight::Output),
            "ffn" => Ok(TargetWeight::Ffn),
            other => Err(Error::config(format!("model has no target weight `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Standard,
    Pissa,
}

/// Components a UniPELT module combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Submodule {
    Lora,
    Adapter,
    Prefix,
}

impl Submodule {
    pub fn gate_site(self) -> &'static str {
        match self {
            Submodule::Lora => "gate_lora",
            Submodule::Adapter => "gate_adapter",
            Submodule::Prefix => "gate_prefix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub method: Method,
    /// LoRA/DoRA rank, adapter bottleneck width.
    pub rank: usize,
    pub prefix_len: usize,
    pub target_weights: Vec<TargetWeight>,
    /// Layer indices counted from the top (0 = nearest the output).
    pub target_layers: Vec<usize>,
    pub init: Init,
    pub unipelt_submodules: Vec<Submodule>,
    /// Multiplier `α / rank` on low-rank products; `α = 2·rank` gives 2.
    pub lora_scale: f32,
    /// Whether UniPELT gate weights are part of the maskable vector.
    pub gates_in_theta: bool,
    /// Seed for adapter weight initialization.
    pub seed: u64,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            method: Method::Lora,
            rank: 4,
            prefix_len: 30,
            target_weights: vec![TargetWeight::Query, TargetWeight::Key, TargetWeight::Value],
            target_layers: vec![0, 1],
            init: Init::Standard,
            unipelt_submodules: vec![Submodule::Lora, Submodule::Adapter, Submodule::Prefix],
            lora_scale: 2.0,
            gates_in_theta: true,
            seed: 42,
        }
    }
}

impl PeftConfig {
    pub fn for_method(method: Method) -> Self {
        PeftConfig {
            method,
            ..PeftConfig::default()
        }
    }

    /// Selects the top `n` layers.
    pub fn with_top_layers(mut self, n: usize) -> Self {
        self.target_layers = (0..n).collect();
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn uses(&self, sub: Submodule) -> bool {
        match self.method {
            Method::Lora | Method::Dora => sub == Submodule::Lora,
            Method::Adapter => sub == Submodule::Adapter,
            Method::Prefix => sub == Submodule::Prefix,
            Method::Ia3 => false,
            Method::Unipelt => self.unipelt_submodules.contains(&sub),
        }
    }

    /// Projections wrapped by low-rank updates, deduplicated and ordered.
    pub fn projections(&self) -> Vec<Projection> {
        let mut out: Vec<Projection> = self
            .target_weights
            .iter()
            .flat_map(|t| t.projections().iter().copied())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Depth indices of the selected layers, ascending.
    pub fn depth_layers(&self, model: &ModelConfig) -> Result<Vec<usize>> {
        let mut layers = self
            .target_layers
            .iter()
            .map(|&t| model.layer_from_top(t))
            .collect::<Result<Vec<_>>>()?;
        layers.sort_unstable();
        layers.dedup();
        Ok(layers)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.target_layers.is_empty() {
            return Err(Error::config("target_layers must not be empty"));
        }
        self.depth_layers(model)?;
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if !(self.lora_scale.is_finite() && self.lora_scale > 0.0) {
            return Err(Error::config(format!("lora_scale must be positive, got {}", self.lora_scale)));
        }
        let low_rank = self.uses(Submodule::Lora);
        if low_rank && self.target_weights.is_empty() {
            return Err(Error::config("low-rank methods need at least one target weight"));
        }
        if self.uses(Submodule::Prefix) {
            if self.prefix_len == 0 {
                return Err(Error::config("prefix_len must be at least 1"));
            }
            if self.prefix_len + model.max_seq_len > POSITION_BUDGET {
                return Err(Error::config(format!(
                    "prefix_len {} + max_seq_len {} exceeds the attention span budget {POSITION_BUDGET}",
                    self.prefix_len, model.max_seq_len
                )));
            }
        }
        if self.method == Method::Unipelt && self.unipelt_submodules.is_empty() {
            return Err(Error::config("unipelt needs at least one submodule"));
        }
        if self.init == Init::Pissa {
            for p in self.projections() {
                let (d, k) = projection_shape(model, p);
                if self.rank > d.min(k) {
                    return Err(Error::config(format!(
                        "pissa rank {} exceeds min dimension of {} ({d}×{k})",
                        self.rank,
                        p.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `(in, out)` shape of a projection.
pub fn projection_shape(model: &ModelConfig, p: Projection) -> (usize, usize) {
    let d = model.hidden_dim;
    match p {
        Projection::FfnIn => (d, model.ffn_dim),
        Projection::FfnOut => (model.ffn_dim, d),
        _ => (d, d),
    }
}
