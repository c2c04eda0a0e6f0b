//! Forward pass of the encoder with optional adapters spliced in.

use super::{Batch, LayerWeights, Projection, TransformerModel};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::peft::{
    prefix_site, Method, PeftModule, Role, SegmentRef, Submodule, SITE_ADAPTER_ATTN, SITE_ADAPTER_FFN,
    SITE_IA3_FFN, SITE_IA3_KEY, SITE_IA3_VALUE,
};

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMode {
    /// Maskable adapter scalars (θ̃).
    pub theta: bool,
    /// Classifier head and unmasked adapter extras.
    pub head: bool,
    /// Frozen base weights. Only useful for gradient checks.
    pub base: bool,
}

impl GradMode {
    pub const NONE: GradMode = GradMode {
        theta: false,
        head: false,
        base: false,
    };
    pub const TRAIN: GradMode = GradMode {
        theta: true,
        head: true,
        base: false,
    };
    pub const THETA: GradMode = GradMode {
        theta: true,
        head: false,
        base: false,
    };
    pub const ALL: GradMode = GradMode {
        theta: true,
        head: true,
        base: true,
    };
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_gain: Var,
    pub attn_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_gain: Var,
    pub ffn_bias: Var,
    pub ffn_in: Var,
    pub ffn_in_bias: Var,
    pub ffn_out: Var,
    pub ffn_out_bias: Var,
}

impl LayerVars {
    fn projection(&self, p: Projection) -> Var {
        match p {
            Projection::Query => self.w_q,
            Projection::Key => self.w_k,
            Projection::Value => self.w_v,
            Projection::Output => self.w_o,
            Projection::FfnIn => self.ffn_in,
            Projection::FfnOut => self.ffn_out,
        }
    }

    fn in_order(&self) -> [Var; 12] {
        [
            self.attn_gain,
            self.attn_bias,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ffn_gain,
            self.ffn_bias,
            self.ffn_in,
            self.ffn_in_bias,
            self.ffn_out,
            self.ffn_out_bias,
        ]
    }
}

/// Graph leaves for every model and adapter tensor of one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    /// One leaf per θ̃ segment.
    pub theta: Vec<Var>,
    /// One leaf per auxiliary adapter segment.
    pub aux: Vec<Var>,
}

fn bind_layer(g: &mut Graph, l: &LayerWeights, grad: bool) -> LayerVars {
    let mut v = |t: &Tensor| g.leaf(t.clone().with_requires_grad(grad));
    LayerVars {
        attn_gain: v(&l.attn_norm.gain),
        attn_bias: v(&l.attn_norm.bias),
        w_q: v(&l.w_q),
        w_k: v(&l.w_k),
        w_v: v(&l.w_v),
        w_o: v(&l.w_o),
        ffn_gain: v(&l.ffn_norm.gain),
        ffn_bias: v(&l.ffn_norm.bias),
        ffn_in: v(&l.ffn_in),
        ffn_in_bias: v(&l.ffn_in_bias),
        ffn_out: v(&l.ffn_out),
        ffn_out_bias: v(&l.ffn_out_bias),
    }
}

impl Binding {
    pub fn new(g: &mut Graph, model: &TransformerModel, peft: Option<&PeftModule>, mode: GradMode) -> Self {
        let base = mode.base;
        let token_embedding = g.leaf(model.token_embedding.clone().with_requires_grad(base));
        let position_embedding = g.leaf(model.position_embedding.clone().with_requires_grad(base));
        let layers = model.layers.iter().map(|l| bind_layer(g, l, base)).collect();
        let final_gain = g.leaf(model.final_norm.gain.clone().with_requires_grad(base));
        let final_bias = g.leaf(model.final_norm.bias.clone().with_requires_grad(base));
        let head_weight = g.leaf(model.head_weight.clone().with_requires_grad(mode.head));
        let head_bias = g.leaf(model.head_bias.clone().with_requires_grad(mode.head));
        let (theta, aux) = match peft {
            Some(p) => (
                (0..p.segments().len())
                    .map(|i| g.leaf(p.tensor(SegmentRef::Theta(i)).with_requires_grad(mode.theta)))
                    .collect(),
                (0..p.aux_segments().len())
                    .map(|i| g.leaf(p.tensor(SegmentRef::Aux(i)).with_requires_grad(mode.head)))
                    .collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        Binding {
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            head_weight,
            head_bias,
            theta,
            aux,
        }
    }

    pub fn peft_var(&self, r: SegmentRef) -> Var {
        match r {
            SegmentRef::Theta(i) => self.theta[i],
            SegmentRef::Aux(i) => self.aux[i],
        }
    }

    fn concat_grads(g: &Graph, vars: &[Var]) -> Vec<f32> {
        let mut out = Vec::new();
        for &v in vars {
            match g.grad(v) {
                Some(gr) => out.extend_from_slice(gr),
                None => out.extend(std::iter::repeat_n(0.0, g.value(v).numel())),
            }
        }
        out
    }

    /// Gradient over θ̃, in θ̃ order.
    pub fn theta_grad(&self, g: &Graph) -> Vec<f32> {
        Self::concat_grads(g, &self.theta)
    }

    pub fn aux_grad(&self, g: &Graph) -> Vec<f32> {
        Self::concat_grads(g, &self.aux)
    }

    /// `(weight, bias)` gradients of the classifier head.
    pub fn head_grads(&self, g: &Graph) -> (Vec<f32>, Vec<f32>) {
        (
            Self::concat_grads(g, &[self.head_weight]),
            Self::concat_grads(g, &[self.head_bias]),
        )
    }

    /// Leaves in the same order as [`TransformerModel::named_parameters`].
    pub fn model_vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            out.extend(l.in_order());
        }
        out.extend([self.final_gain, self.final_bias, self.head_weight, self.head_bias]);
        out
    }
}

/// Logits plus intermediate values useful for inspection.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Per layer: attention sublayer output after `W_O` and before any adapter.
    pub attention_outputs: Vec<Var>,
}

/// Per-example gate values of one UniPELT submodule.
struct Gate {
    /// `[batch×1]` multiplicative gate.
    scale: Var,
    /// `[batch×1]` log of the gate, used for prefix attention mass.
    log: Var,
}

struct Ctx<'a> {
    bind: &'a Binding,
    peft: Option<&'a PeftModule>,
    batch_size: usize,
    seq_len: usize,
}

impl Ctx<'_> {
    fn peft_var(&self, layer: usize, site: &str, role: Role) -> Option<Var> {
        let p = self.peft?;
        p.find(layer, site, role).map(|r| self.bind.peft_var(r))
    }

    fn uses(&self, sub: Submodule) -> bool {
        self.peft.is_some_and(|p| p.config().uses(sub))
    }

    fn is_method(&self, m: Method) -> bool {
        self.peft.is_some_and(|p| p.method() == m)
    }
}

fn norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

/// Scaled dot-product attention for one head. Returns `(output, weights)`.
///
/// With a prefix, keys and values are `[P_K; K]` and `[P_V; V]`; `prefix_log_gate`
/// (a `[1×1]` scalar) is added to the prefix scores before the softmax.
pub(crate) fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    prefix_log_gate: Option<Var>,
) -> Result<(Var, Var)> {
    let (_, dh) = g.value(q).dims2()?;
    let (k, v, prefix_len) = match prefix {
        Some((pk, pv)) => {
            let l = g.value(pk).rows();
            (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?, l)
        }
        None => (k, v, 0),
    };
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f32).sqrt())?;
    if let Some(lg) = prefix_log_gate {
        scores = g.add_to_leading_cols(scores, lg, prefix_len)?;
    }
    let weights = g.softmax(scores)?;
    Ok((g.matmul(weights, v)?, weights))
}

impl TransformerModel {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.config;
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if batch.seq_len > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, cfg.max_seq_len
            )));
        }
        if batch.token_ids.len() != batch.len() * batch.seq_len {
            return Err(Error::contract("token matrix does not match batch size"));
        }
        if let Some(&t) = batch.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::contract(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= cfg.num_classes) {
            return Err(Error::contract(format!("label {y} outside {} classes", cfg.num_classes)));
        }
        Ok(())
    }

    /// Builds the forward graph and returns `[batch × num_classes]` logits.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, peft: Option<&PeftModule>, batch: &Batch) -> Result<Var> {
        Ok(self.forward_traced(g, bind, peft, batch)?.logits)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        bind: &Binding,
        peft: Option<&PeftModule>,
        batch: &Batch,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let ctx = Ctx {
            bind,
            peft,
            batch_size: batch.len(),
            seq_len: batch.seq_len,
        };
        let positions: Vec<usize> = (0..ctx.batch_size).flat_map(|_| 0..ctx.seq_len).collect();
        let tok = g.gather_rows(bind.token_embedding, &batch.token_ids)?;
        let pos = g.gather_rows(bind.position_embedding, &positions)?;
        let mut h = g.add(tok, pos)?;

        let mut attention_outputs = Vec::with_capacity(self.layers.len());
        for layer in 0..self.layers.len() {
            let (next, attn) = self.block(g, &ctx, layer, h)?;
            attention_outputs.push(attn);
            h = next;
        }
        let h = norm(g, h, bind.final_gain, bind.final_bias)?;
        let pooled = g.mean_row_groups(h, ctx.seq_len)?;
        let logits = g.matmul(pooled, bind.head_weight)?;
        let logits = g.add_row(logits, bind.head_bias)?;
        Ok(ForwardOutput {
            logits,
            attention_outputs,
        })
    }

    fn gate(&self, g: &mut Graph, ctx: &Ctx, layer: usize, sub: Submodule, h: Var) -> Result<Option<Gate>> {
        if !ctx.is_method(Method::Unipelt) || !ctx.uses(sub) {
            return Ok(None);
        }
        let peft = ctx.peft.expect("unipelt implies a module");
        if let Some(c) = peft.gate_override() {
            let scale = g.constant(Tensor::full(ctx.batch_size, 1, c));
            let log = g.constant(Tensor::full(ctx.batch_size, 1, c.ln()));
            return Ok(Some(Gate { scale, log }));
        }
        let w = ctx
            .peft_var(layer, sub.gate_site(), Role::Gate)
            .ok_or_else(|| Error::Internal(format!("missing gate for layer {layer}")))?;
        let pooled = g.mean_row_groups(h, ctx.seq_len)?;
        let z = g.matmul(pooled, w)?;
        Ok(Some(Gate {
            scale: g.sigmoid(z)?,
            log: g.log_sigmoid(z)?,
        }))
    }

    /// `x·W` for a base projection, with any low-rank update on top.
    fn project(&self, g: &mut Graph, ctx: &Ctx, layer: usize, p: Projection, x: Var, gate: Option<Var>) -> Result<Var> {
        let w = ctx.bind.layers[layer].projection(p);
        let (Some(b), Some(a)) = (
            ctx.peft_var(layer, p.name(), Role::B),
            ctx.peft_var(layer, p.name(), Role::A),
        ) else {
            return g.matmul(x, w);
        };
        let scale = ctx.peft.expect("bound adapter").config().lora_scale;
        if let Some(m) = ctx.peft_var(layer, p.name(), Role::Magnitude) {
            let ba = g.matmul(b, a)?;
            let ba = g.scale(ba, scale)?;
            let merged = g.add(w, ba)?;
            let norms = g.column_l2_norm(merged)?;
            if let Some(j) = g.value(norms).data().iter().position(|&n| n == 0.0) {
                return Err(Error::numeric(format!(
                    "DoRA column {j} of layers.{layer}.{} has zero norm",
                    p.name()
                )));
            }
            let direction = g.div_row(merged, norms)?;
            let effective = g.mul_row(direction, m)?;
            return g.matmul(x, effective);
        }
        let base = g.matmul(x, w)?;
        let down = g.matmul(x, b)?;
        let up = g.matmul(down, a)?;
        let mut delta = g.scale(up, scale)?;
        if let Some(gv) = gate {
            delta = g.mul_col(delta, gv)?;
        }
        g.add(base, delta)
    }

    fn adapter(&self, g: &mut Graph, ctx: &Ctx, layer: usize, site: &str, x: Var, gate: Option<Var>) -> Result<Var> {
        let (Some(b), Some(a)) = (ctx.peft_var(layer, site, Role::B), ctx.peft_var(layer, site, Role::A)) else {
            return Ok(x);
        };
        let at = g.transpose(a)?;
        let down = g.matmul(x, at)?;
        let hidden = g.relu(down)?;
        let bt = g.transpose(b)?;
        let mut up = g.matmul(hidden, bt)?;
        if let Some(gv) = gate {
            up = g.mul_col(up, gv)?;
        }
        g.add(x, up)
    }

    /// One pre-norm encoder block. Returns the new residual stream and the attention output.
    fn block(&self, g: &mut Graph, ctx: &Ctx, layer: usize, h: Var) -> Result<(Var, Var)> {
        let lv = &ctx.bind.layers[layer];
        let cfg = &self.config;
        let (s, heads, dh) = (ctx.seq_len, cfg.num_heads, cfg.head_dim());

        let row_gate = |g: &mut Graph, gate: &Option<Gate>| -> Result<Option<Var>> {
            gate.as_ref().map(|gt| g.repeat_rows(gt.scale, s)).transpose()
        };
        let lora_gate = self.gate(g, ctx, layer, Submodule::Lora, h)?;
        let adapter_gate = self.gate(g, ctx, layer, Submodule::Adapter, h)?;
        let prefix_gate = self.gate(g, ctx, layer, Submodule::Prefix, h)?;
        let lora_rows = row_gate(g, &lora_gate)?;
        let adapter_rows = row_gate(g, &adapter_gate)?;

        let x = norm(g, h, lv.attn_gain, lv.attn_bias)?;
        let q = self.project(g, ctx, layer, Projection::Query, x, lora_rows)?;
        let mut k = self.project(g, ctx, layer, Projection::Key, x, lora_rows)?;
        let mut v = self.project(g, ctx, layer, Projection::Value, x, lora_rows)?;
        if let Some(lk) = ctx.peft_var(layer, SITE_IA3_KEY, Role::Scale) {
            k = g.mul_row(k, lk)?;
        }
        if let Some(lv_scale) = ctx.peft_var(layer, SITE_IA3_VALUE, Role::Scale) {
            v = g.mul_row(v, lv_scale)?;
        }

        let prefixes: Option<Vec<(Var, Var)>> = (0..heads)
            .map(|hd| {
                let site = prefix_site(hd);
                Some((
                    ctx.peft_var(layer, &site, Role::PrefixKey)?,
                    ctx.peft_var(layer, &site, Role::PrefixValue)?,
                ))
            })
            .collect();

        let mut samples = Vec::with_capacity(ctx.batch_size);
        for b in 0..ctx.batch_size {
            let qb = g.slice_rows(q, b * s, s)?;
            let kb = g.slice_rows(k, b * s, s)?;
            let vb = g.slice_rows(v, b * s, s)?;
            let log_gate = match (&prefix_gate, &prefixes) {
                (Some(gt), Some(_)) => Some(g.slice_rows(gt.log, b, 1)?),
                _ => None,
            };
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(qb, hd * dh, dh)?;
                let kh = g.slice_cols(kb, hd * dh, dh)?;
                let vh = g.slice_cols(vb, hd * dh, dh)?;
                let prefix = prefixes.as_ref().map(|p| p[hd]);
                let (o, _) = attend(g, qh, kh, vh, prefix, log_gate)?;
                outs.push(o);
            }
            samples.push(g.concat_cols(&outs)?);
        }
        let mixed = g.concat_rows(&samples)?;
        let attn = self.project(g, ctx, layer, Projection::Output, mixed, lora_rows)?;
        let adapted = self.adapter(g, ctx, layer, SITE_ADAPTER_ATTN, attn, adapter_rows)?;
        let h = g.add(h, adapted)?;

        let x = norm(g, h, lv.ffn_gain, lv.ffn_bias)?;
        let inner = self.project(g, ctx, layer, Projection::FfnIn, x, lora_rows)?;
        let inner = g.add_row(inner, lv.ffn_in_bias)?;
        let mut inner = g.gelu(inner)?;
        if let Some(lff) = ctx.peft_var(layer, SITE_IA3_FFN, Role::Scale) {
            inner = g.mul_row(inner, lff)?;
        }
        let out = self.project(g, ctx, layer, Projection::FfnOut, inner, lora_rows)?;
        let out = g.add_row(out, lv.ffn_out_bias)?;
        let out = self.adapter(g, ctx, layer, SITE_ADAPTER_FFN, out, adapter_rows)?;
        Ok((g.add(h, out)?, attn))
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, peft: Option<&PeftModule>, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, self, peft, GradMode::NONE);
        let out = self.forward(&mut g, &bind, peft, batch)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suppressed_prefix_matches_plain_attention() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(2, 2, vec![0.5, 0.2, 0.1, 0.9]));
        let k = g.constant(Tensor::matrix(2, 2, vec![0.3, -0.4, 0.8, 0.1]));
        let v = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]));
        let pk = g.constant(Tensor::full(3, 2, -1e6));
        let pv = g.constant(Tensor::full(3, 2, 7.0));
        let (plain, _) = attend(&mut g, q, k, v, None, None).unwrap();
        let (with_prefix, weights) = attend(&mut g, q, k, v, Some((pk, pv)), None).unwrap();
        assert!(g.value(plain).max_abs_diff(g.value(with_prefix)) < 1e-4);
        assert_eq!(g.value(weights).shape(), &[2, 5]);
    }

    #[test]
    fn attention_rows_normalize_over_prefix_and_sequence() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(3, 2, vec![0.5, 0.2, 0.1, 0.9, -0.3, 0.4]));
        let k = g.constant(Tensor::matrix(3, 2, vec![0.3, -0.4, 0.8, 0.1, 0.0, 1.0]));
        let v = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.0]));
        let pk = g.constant(Tensor::matrix(2, 2, vec![0.2, 0.1, -0.5, 0.3]));
        let pv = g.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]));
        let (_, weights) = attend(&mut g, q, k, v, Some((pk, pv)), None).unwrap();
        let w = g.value(weights);
        assert_eq!(w.shape(), &[3, 5]);
        for row in w.data().chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_log_gate_removes_prefix_exactly() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![0.5, 0.2]));
        let k = g.constant(Tensor::matrix(2, 2, vec![0.3, -0.4, 0.8, 0.1]));
        let v = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]));
        let pk = g.constant(Tensor::full(1, 2, 3.0));
        let pv = g.constant(Tensor::full(1, 2, 9.0));
        let closed = g.constant(Tensor::scalar(f32::NEG_INFINITY));
        let (plain, _) = attend(&mut g, q, k, v, None, None).unwrap();
        let (gated, _) = attend(&mut g, q, k, v, Some((pk, pv)), Some(closed)).unwrap();
        assert!(g.value(plain).bitwise_eq(g.value(gated)));
    }
}
