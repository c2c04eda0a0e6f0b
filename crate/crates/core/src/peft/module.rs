use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{projection_shape, Init, Method, PeftConfig, Submodule};
use super::pissa::pissa_init;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Projection, TransformerModel, INIT_STD};

/// Role of a tensor inside an adapter. Declaration order is the θ̃ order within a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    B,
    A,
    Magnitude,
    PrefixKey,
    PrefixValue,
    Scale,
    Gate,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::B => "B",
            Role::A => "A",
            Role::Magnitude => "m",
            Role::PrefixKey => "P_K",
            Role::PrefixValue => "P_V",
            Role::Scale => "l",
            Role::Gate => "W_G",
        })
    }
}

pub const SITE_ADAPTER_ATTN: &str = "adapter_attn";
pub const SITE_ADAPTER_FFN: &str = "adapter_ffn";
pub const SITE_IA3_KEY: &str = "ia3_k";
pub const SITE_IA3_VALUE: &str = "ia3_v";
pub const SITE_IA3_FFN: &str = "ia3_ff";

pub fn prefix_site(head: usize) -> String {
    format!("prefix.h{head:02}")
}

/// A contiguous run of a flat parameter vector backing one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Depth index of the layer (0 = nearest the input).
    pub layer: usize,
    pub site: String,
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn name(&self) -> String {
        format!("layers.{}.{}.{}", self.layer, self.site, self.role)
    }
}

/// Locates a tensor either in θ̃ or in the unmasked auxiliary vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentRef {
    Theta(usize),
    Aux(usize),
}

/// Flat view over all maskable adapter scalars. Writes go straight to the module.
#[derive(Debug)]
pub struct ThetaTilde<'a> {
    values: &'a mut [f32],
    segments: &'a [Segment],
}

impl ThetaTilde<'_> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        self.values
    }

    pub fn segments(&self) -> &[Segment] {
        self.segments
    }

    /// Splits the flat vector into its tensors.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.segments
            .iter()
            .map(|s| Tensor::matrix(s.rows, s.cols, self.values[s.range()].to_vec()))
            .collect()
    }

    /// Writes tensors back in segment order.
    pub fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.segments.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                self.segments.len(),
                tensors.len()
            )));
        }
        for (seg, t) in self.segments.iter().zip(tensors) {
            if t.shape() != [seg.rows, seg.cols] {
                return Err(Error::Dimension {
                    op: "load_tensors",
                    lhs: vec![seg.rows, seg.cols],
                    rhs: t.shape().to_vec(),
                });
            }
            self.values[seg.range()].copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Adapter weights attached to a [`TransformerModel`].
///
/// Maskable scalars live in one flat vector (θ̃) ordered by layer, then site
/// name, then role. UniPELT gates excluded from masking live in `aux`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftModule {
    config: PeftConfig,
    model_config: ModelConfig,
    theta: Vec<f32>,
    segments: Vec<Segment>,
    aux: Vec<f32>,
    aux_segments: Vec<Segment>,
    gate_override: Option<f32>,
}

struct Slot {
    site: String,
    role: Role,
    rows: usize,
    cols: usize,
    maskable: bool,
}

/// Deterministic θ̃ and auxiliary layouts for a configuration.
pub fn layout(model: &ModelConfig, cfg: &PeftConfig) -> Result<(Vec<Segment>, Vec<Segment>)> {
    cfg.validate(model)?;
    let d = model.hidden_dim;
    let r = cfg.rank;
    let mut theta = Vec::new();
    let mut aux = Vec::new();
    let (mut t_off, mut a_off) = (0, 0);
    for layer in cfg.depth_layers(model)? {
        let mut slots = Vec::new();
        let mut slot = |site: &str, role, rows, cols, maskable| {
            slots.push(Slot {
                site: site.to_string(),
                role,
                rows,
                cols,
                maskable,
            })
        };
        if cfg.uses(Submodule::Lora) {
            for p in cfg.projections() {
                let (fan_in, fan_out) = projection_shape(model, p);
                slot(p.name(), Role::B, fan_in, r, true);
                slot(p.name(), Role::A, r, fan_out, true);
                if cfg.method == Method::Dora {
                    slot(p.name(), Role::Magnitude, 1, fan_out, true);
                }
            }
        }
        if cfg.uses(Submodule::Adapter) {
            for site in [SITE_ADAPTER_ATTN, SITE_ADAPTER_FFN] {
                slot(site, Role::B, d, r, true);
                slot(site, Role::A, r, d, true);
            }
        }
        if cfg.uses(Submodule::Prefix) {
            for h in 0..model.num_heads {
                let site = prefix_site(h);
                slot(&site, Role::PrefixKey, cfg.prefix_len, model.head_dim(), true);
                slot(&site, Role::PrefixValue, cfg.prefix_len, model.head_dim(), true);
            }
        }
        if cfg.method == Method::Ia3 {
            slot(SITE_IA3_KEY, Role::Scale, 1, d, true);
            slot(SITE_IA3_VALUE, Role::Scale, 1, d, true);
            slot(SITE_IA3_FFN, Role::Scale, 1, model.ffn_dim, true);
        }
        if cfg.method == Method::Unipelt {
            for &sub in &cfg.unipelt_submodules {
                slot(sub.gate_site(), Role::Gate, d, 1, cfg.gates_in_theta);
            }
        }
        slots.sort_by(|x, y| (&x.site, x.role).cmp(&(&y.site, y.role)));
        for s in slots {
            let (list, off) = if s.maskable {
                (&mut theta, &mut t_off)
            } else {
                (&mut aux, &mut a_off)
            };
            list.push(Segment {
                layer,
                site: s.site,
                role: s.role,
                rows: s.rows,
                cols: s.cols,
                offset: *off,
            });
            *off += s.rows * s.cols;
        }
    }
    Ok((theta, aux))
}

fn total_len(segments: &[Segment]) -> usize {
    segments.last().map_or(0, |s| s.offset + s.len())
}

fn projection_by_name(name: &str) -> Option<Projection> {
    Projection::ALL.into_iter().find(|p| p.name() == name)
}

/// Attaches the adapters described by `cfg`, freezing the base model.
///
/// PiSSA initialization rewrites each wrapped base weight to its residual.
pub fn attach(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<PeftModule> {
    let (segments, aux_segments) = layout(&model.config, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = vec![0.0f32; total_len(&segments)];
    let mut aux = vec![0.0f32; total_len(&aux_segments)];
    let scale = cfg.lora_scale;

    for (segs, values) in [(&segments, &mut theta), (&aux_segments, &mut aux)] {
        for seg in segs.iter() {
            let dst = &mut values[seg.range()];
            match seg.role {
                Role::B | Role::Magnitude => {}
                Role::A if cfg.init == Init::Pissa && projection_by_name(&seg.site).is_some() => {}
                Role::A | Role::PrefixKey | Role::PrefixValue | Role::Gate => {
                    dst.copy_from_slice(Tensor::randn(seg.rows, seg.cols, INIT_STD, &mut rng).data());
                }
                Role::Scale => dst.fill(1.0),
            }
        }
    }

    let mut module = PeftModule {
        config: cfg.clone(),
        model_config: model.config.clone(),
        theta,
        segments,
        aux,
        aux_segments,
        gate_override: None,
    };

    if cfg.uses(Submodule::Lora) {
        for layer in cfg.depth_layers(&model.config)? {
            for p in cfg.projections() {
                if cfg.init == Init::Pissa {
                    let w0 = model.layers[layer].projection(p).clone();
                    let (b, a, w_res) = pissa_init(&w0, cfg.rank)?;
                    // Fold the α/r multiplier into the factors so that scale·B·A = U_r S_r V_rᵀ.
                    let root = scale.sqrt();
                    let b = b.data().iter().map(|v| v / root).collect::<Vec<_>>();
                    let a = a.data().iter().map(|v| v / root).collect::<Vec<_>>();
                    module.write_site(layer, p.name(), Role::B, &b)?;
                    module.write_site(layer, p.name(), Role::A, &a)?;
                    *model.layers[layer].projection_mut(p) = w_res;
                }
                if cfg.method == Method::Dora {
                    let norms = module.dora_reference_norms(model, layer, p)?;
                    module.write_site(layer, p.name(), Role::Magnitude, &norms)?;
                }
            }
        }
    }
    model.freeze();
    Ok(module)
}

fn expect_method(cfg: &PeftConfig, method: Method) -> Result<()> {
    if cfg.method != method {
        return Err(Error::contract(format!(
            "attach_{method} called with method `{}`",
            cfg.method
        )));
    }
    Ok(())
}

/// `x·W₀ + scale·(x·B)·A` on each targeted projection.
pub fn attach_lora(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<PeftModule> {
    expect_method(cfg, Method::Lora)?;
    attach(model, cfg)
}

/// `x·(m ⊙ (W₀ + scale·BA) / ‖W₀ + scale·BA‖_c)` with `m` initialized to `‖W₀‖_c`.
pub fn attach_dora(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<PeftModule> {
    expect_method(cfg, Method::Dora)?;
    attach(model, cfg)
}

/// Residual bottleneck `h + relu(h·Aᵀ)·Bᵀ` after attention and after the FFN.
pub fn attach_adapter(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<PeftModule> {
    expect_method(cfg, Method::Adapter)?;
    attach(model, cfg)
}

/// Per-head trainable key/value prefixes of length `prefix_len`.
pub fn attach_prefix(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<PeftModule> {
    expect_method(cfg, Method::Prefix)?;
    attach(model, cfg)
}

/// Elementwise rescaling of keys, values and FFN inner activations.
pub fn attach_ia3(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<PeftModule> {
    expect_method(cfg, Method::Ia3)?;
    attach(model, cfg)
}

/// Gated combination of LoRA, adapter and prefix submodules.
pub fn attach_unipelt(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<PeftModule> {
    expect_method(cfg, Method::Unipelt)?;
    attach(model, cfg)
}

/// Writable flat view of a module's θ̃.
pub fn theta_tilde(peft: &mut PeftModule) -> ThetaTilde<'_> {
    ThetaTilde {
        values: &mut peft.theta,
        segments: &peft.segments,
    }
}

impl PeftModule {
    /// Rebuilds a module from stored flat vectors.
    pub fn from_parts(model: &ModelConfig, cfg: &PeftConfig, theta: Vec<f32>, aux: Vec<f32>) -> Result<Self> {
        let (segments, aux_segments) = layout(model, cfg)?;
        if theta.len() != total_len(&segments) || aux.len() != total_len(&aux_segments) {
            return Err(Error::format(format!(
                "stored adapter vectors ({}, {}) do not match layout ({}, {})",
                theta.len(),
                aux.len(),
                total_len(&segments),
                total_len(&aux_segments)
            )));
        }
        Ok(PeftModule {
            config: cfg.clone(),
            model_config: model.clone(),
            theta,
            segments,
            aux,
            aux_segments,
            gate_override: None,
        })
    }

    pub fn config(&self) -> &PeftConfig {
        &self.config
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn theta(&self) -> &[f32] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f32] {
        &mut self.theta
    }

    pub fn theta_len(&self) -> usize {
        self.theta.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn aux(&self) -> &[f32] {
        &self.aux
    }

    pub fn aux_mut(&mut self) -> &mut [f32] {
        &mut self.aux
    }

    pub fn aux_segments(&self) -> &[Segment] {
        &self.aux_segments
    }

    /// Forces every UniPELT gate to a constant. Intended for tests.
    pub fn set_gate_override(&mut self, value: Option<f32>) {
        self.gate_override = value;
    }

    pub fn gate_override(&self) -> Option<f32> {
        self.gate_override
    }

    pub fn find(&self, layer: usize, site: &str, role: Role) -> Option<SegmentRef> {
        let hit = |s: &Segment| s.layer == layer && s.site == site && s.role == role;
        if let Some(i) = self.segments.iter().position(hit) {
            return Some(SegmentRef::Theta(i));
        }
        self.aux_segments.iter().position(hit).map(SegmentRef::Aux)
    }

    pub fn segment(&self, r: SegmentRef) -> &Segment {
        match r {
            SegmentRef::Theta(i) => &self.segments[i],
            SegmentRef::Aux(i) => &self.aux_segments[i],
        }
    }

    /// Copy of the tensor backing `r`.
    pub fn tensor(&self, r: SegmentRef) -> Tensor {
        let (seg, values) = match r {
            SegmentRef::Theta(i) => (&self.segments[i], &self.theta),
            SegmentRef::Aux(i) => (&self.aux_segments[i], &self.aux),
        };
        Tensor::matrix(seg.rows, seg.cols, values[seg.range()].to_vec())
    }

    pub fn tensor_at(&self, layer: usize, site: &str, role: Role) -> Option<Tensor> {
        self.find(layer, site, role).map(|r| self.tensor(r))
    }

    /// Overwrites the tensor at `(layer, site, role)`.
    pub fn write_site(&mut self, layer: usize, site: &str, role: Role, data: &[f32]) -> Result<()> {
        let r = self
            .find(layer, site, role)
            .ok_or_else(|| Error::contract(format!("no adapter tensor layers.{layer}.{site}.{role}")))?;
        let (seg, values) = match r {
            SegmentRef::Theta(i) => (&self.segments[i], &mut self.theta),
            SegmentRef::Aux(i) => (&self.aux_segments[i], &mut self.aux),
        };
        if data.len() != seg.len() {
            return Err(Error::Dimension {
                op: "write_site",
                lhs: vec![seg.rows, seg.cols],
                rhs: vec![data.len()],
            });
        }
        values[seg.range()].copy_from_slice(data);
        Ok(())
    }

    /// Column norms of `W₀ + scale·BA` for a DoRA-wrapped projection.
    fn dora_reference_norms(&self, model: &TransformerModel, layer: usize, p: Projection) -> Result<Vec<f32>> {
        let w0 = model.layers[layer].projection(p);
        let b = self.tensor_at(layer, p.name(), Role::B).expect("dora B");
        let a = self.tensor_at(layer, p.name(), Role::A).expect("dora A");
        let ba = b.matmul(&a)?;
        let (d, k) = w0.dims2()?;
        let scale = self.config.lora_scale as f64;
        let mut norms = Vec::with_capacity(k);
        for j in 0..k {
            let n = (0..d)
                .map(|i| {
                    let v = w0.data()[i * k + j] as f64 + scale * ba.data()[i * k + j] as f64;
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            if n == 0.0 {
                return Err(Error::numeric(format!(
                    "DoRA column {j} of layers.{layer}.{} has zero norm",
                    p.name()
                )));
            }
            norms.push(n as f32);
        }
        Ok(norms)
    }
}
