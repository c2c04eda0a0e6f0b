//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and `backward` is a single reverse sweep.

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f32> },
    ColumnL2Norm(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    Transpose(Var),
    MeanRowGroups { x: Var, group: usize },
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
    AddToLeadingCols { x: Var, s: Var, ncols: usize },
    LogSoftmaxNll { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded forward computation. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = c * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner) as f32
}

fn sigmoid_scalar(x: f32) -> f32 {
    let x = x as f64;
    if x >= 0.0 {
        (1.0 / (1.0 + (-x).exp())) as f32
    } else {
        let e = x.exp();
        (e / (1.0 + e)) as f32
    }
}

fn log_sigmoid_scalar(x: f32) -> f32 {
    // log σ(x) = -softplus(-x)
    let x = x as f64;
    let v = if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    };
    v as f32
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient held by a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (n2, p) = self.dims(b)?;
        if n != n2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, n, p);
        Ok(self.push(Tensor::matrix(m, p, out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(op, self.value(a), self.value(b)));
        }
        let (m, n) = self.dims(a)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::matrix(m, n, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Hadamard(a, b), &[a, b]))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, r: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (m, n) = self.dims(a)?;
        let (rr, rn) = self.dims(r)?;
        if rr != 1 || rn != n {
            return Err(dim_err(op, self.value(a), self.value(r)));
        }
        let row = self.data(r);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::matrix(m, n, data))
    }

    /// `a[m×n] + r[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, r, |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, r), &[a, r]))
    }

    /// `a[m×n] ⊙ r[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, r, |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, r), &[a, r]))
    }

    /// `a[m×n] / r[1×n]` broadcast over rows.
    pub fn div_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_broadcast("div_row", a, r, |x, y| x / y)?;
        Ok(self.push(t, Op::DivRow(a, r), &[a, r]))
    }

    /// Scales row `i` of `a[m×n]` by `c[m×1]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (cm, cn) = self.dims(c)?;
        if cm != m || cn != 1 {
            return Err(dim_err("mul_col", self.value(a), self.value(c)));
        }
        let col = self.data(c);
        let data = self
            .data(a)
            .chunks(n)
            .zip(col)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |&x| x * s))
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::MulCol(a, c), &[a, c]))
    }

    /// `a * s` for a tracked scalar `s[1×1]`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(dim_err("mul_scalar", self.value(a), self.value(s)));
        }
        let (m, n) = self.dims(a)?;
        let sv = self.data(s)[0];
        let data = self.data(a).iter().map(|&x| x * sv).collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::MulScalar(a, s), &[a, s]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let data = self.data(a).iter().map(|&x| x * c).collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::Scale(a, c), &[a]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Ok(self.push(Tensor::matrix(m, n, data), op, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), gelu_scalar)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::LogSigmoid(a), log_sigmoid_scalar)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.data(a).chunks(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&x| ((x - max) as f64).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| (e / total) as f32));
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::Softmax(a), &[a]))
    }

    /// Row-wise normalization to zero mean and unit variance, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let mut out = Vec::with_capacity(m * n);
        let mut rstds = Vec::with_capacity(m);
        for row in self.data(a).chunks(n) {
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|&x| ((x as f64 - mean) * rstd) as f32));
            rstds.push(rstd as f32);
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::LayerNorm { x: a, rstd: rstds }, &[a]))
    }

    /// Euclidean norm of each column, as a `[1×n]` row.
    pub fn column_l2_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let data = self.data(a);
        let norms = (0..n)
            .map(|j| {
                (0..m)
                    .map(|i| (data[i * n + j] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt() as f32
            })
            .collect();
        Ok(self.push(Tensor::matrix(1, n, norms), Op::ColumnL2Norm(a), &[a]))
    }

    /// Stacks tensors vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, n) = self.dims(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(dim_err("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::matrix(rows, n, data), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Stacks tensors horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(dim_err("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(m, total, data), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if len == 0 || start + len > m {
            return Err(Error::contract(format!(
                "slice_rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = self.data(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::matrix(len, n, data), Op::SliceRows { x: a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if len == 0 || start + len > n {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::matrix(m, len, data), Op::SliceCols { x: a, start }, &[a]))
    }

    /// Repeats each row `times` times in place: `[m×n] -> [m·times×n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if times == 0 {
            return Err(Error::contract("repeat_rows with zero repetitions"));
        }
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| std::iter::repeat_n(row, times).flatten().copied())
            .collect();
        Ok(self.push(Tensor::matrix(m * times, n, data), Op::RepeatRows { x: a, times }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let data = kernels::transpose(self.data(a), m, n);
        Ok(self.push(Tensor::matrix(n, m, data), Op::Transpose(a), &[a]))
    }

    /// Averages consecutive groups of `group` rows: `[g·group×n] -> [g×n]`.
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if group == 0 || m % group != 0 {
            return Err(Error::contract(format!(
                "cannot pool {m} rows in groups of {group}"
            )));
        }
        let data = self.data(a);
        let mut out = Vec::with_capacity(m / group * n);
        for g in 0..m / group {
            for j in 0..n {
                let s: f64 = (0..group).map(|i| data[(g * group + i) * n + j] as f64).sum();
                out.push((s / group as f64) as f32);
            }
        }
        Ok(self.push(Tensor::matrix(m / group, n, out), Op::MeanRowGroups { x: a, group }, &[a]))
    }

    /// Sum of all entries as a `[1×1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = kernels::sum(self.data(a));
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Selects rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table)?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("row index {bad} out of range for {m} rows")));
        }
        let src = self.data(table);
        let data = ids.iter().flat_map(|&i| src[i * n..(i + 1) * n].iter().copied()).collect();
        Ok(self.push(
            Tensor::matrix(ids.len(), n, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Adds scalar `s[1×1]` to the first `ncols` columns of every row.
    pub fn add_to_leading_cols(&mut self, a: Var, s: Var, ncols: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if !self.value(s).is_scalar() || ncols > n {
            return Err(dim_err("add_to_leading_cols", self.value(a), self.value(s)));
        }
        let sv = self.data(s)[0];
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(move |(j, &x)| if j < ncols { x + sv } else { x })
            })
            .collect();
        Ok(self.push(
            Tensor::matrix(m, n, data),
            Op::AddToLeadingCols { x: a, s, ncols },
            &[a, s],
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn log_softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits)?;
        if labels.len() != m {
            return Err(Error::Dimension {
                op: "log_softmax_nll",
                lhs: vec![m, n],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::contract(format!("label {bad} out of range for {n} classes")));
        }
        let mut probs = Vec::with_capacity(m * n);
        let mut total = 0.0f64;
        for (row, &y) in self.data(logits).chunks(n).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y] as f64;
            probs.extend(row.iter().map(|&x| (x as f64 - lse).exp() as f32));
        }
        let loss = (total / m as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::LogSoftmaxNll {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaves created with
    /// `requires_grad` receive `∂loss/∂leaf`; intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Internal(format!("unknown node {}", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, dg) in self.input_grads(id, &g)? {
                if input.0 >= id {
                    return Err(Error::Internal(format!(
                        "cycle: node {id} consumes later node {}",
                        input.0
                    )));
                }
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn input_grads(&self, id: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[id];
        let (om, on) = node.value.dims2()?;
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| self.nodes[v.0].value.dims2();
        let want = |v: Var| self.nodes[v.0].needs_grad;

        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, n) = dims(*a)?;
                let (_, p) = dims(*b)?;
                let mut r = Vec::with_capacity(2);
                if want(*a) {
                    r.push((*a, kernels::matmul_bt(g, val(*b), m, p, n)));
                }
                if want(*b) {
                    r.push((*b, kernels::matmul_at(val(*a), g, m, n, p)));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Hadamard(a, b) => vec![
                (*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()),
                (*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()),
            ],
            Op::AddRow(a, r) => vec![(*a, g.to_vec()), (*r, column_sums(g, om, on))],
            Op::MulRow(a, r) => {
                let rv = val(*r);
                let da = g.chunks(on).flat_map(|row| row.iter().zip(rv).map(|(x, y)| x * y)).collect();
                let prod: Vec<f32> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*r, column_sums(&prod, om, on))]
            }
            Op::DivRow(a, r) => {
                let rv = val(*r);
                let av = val(*a);
                let da = g.chunks(on).flat_map(|row| row.iter().zip(rv).map(|(x, y)| x / y)).collect();
                let mut dr = vec![0.0f64; on];
                for i in 0..om {
                    for j in 0..on {
                        let k = i * on + j;
                        dr[j] -= g[k] as f64 * av[k] as f64 / (rv[j] as f64 * rv[j] as f64);
                    }
                }
                vec![(*a, da), (*r, dr.into_iter().map(|v| v as f32).collect())]
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                let av = val(*a);
                let da = g
                    .chunks(on)
                    .zip(cv)
                    .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                    .collect();
                let dc = g
                    .chunks(on)
                    .zip(av.chunks(on))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() as f32)
                    .collect();
                vec![(*a, da), (*c, dc)]
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                let ds: f64 = g.iter().zip(val(*a)).map(|(&x, &y)| x as f64 * y as f64).sum();
                vec![(*a, g.iter().map(|x| x * sv).collect()), (*s, vec![ds as f32])]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Relu(a) => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(&d, &x)| if x > 0.0 { d } else { 0.0 }).collect(),
            )],
            Op::Gelu(a) => vec![(*a, g.iter().zip(val(*a)).map(|(&d, &x)| d * gelu_grad(x)).collect())],
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(&d, &y)| d * y * (1.0 - y)).collect())],
            Op::LogSigmoid(a) => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(&d, &x)| d * sigmoid_scalar(-x)).collect(),
            )],
            Op::Softmax(a) => {
                let mut da = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(on).zip(out.chunks(on)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&x, &y)| x as f64 * y as f64).sum();
                    da.extend(gr.iter().zip(yr).map(|(&x, &y)| (y as f64 * (x as f64 - dot)) as f32));
                }
                vec![(*a, da)]
            }
            Op::LayerNorm { x, rstd } => {
                let n = on as f64;
                let mut da = Vec::with_capacity(g.len());
                for ((gr, yr), &rs) in g.chunks(on).zip(out.chunks(on)).zip(rstd) {
                    let sum_g: f64 = gr.iter().map(|&v| v as f64).sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    da.extend(gr.iter().zip(yr).map(|(&gi, &yi)| {
                        (rs as f64 / n * (n * gi as f64 - sum_g - yi as f64 * sum_gy)) as f32
                    }));
                }
                vec![(*x, da)]
            }
            Op::ColumnL2Norm(a) => {
                let (m, n) = dims(*a)?;
                let av = val(*a);
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let norm = out[j];
                        da[i * n + j] = if norm > 0.0 { g[j] * av[i * n + j] / norm } else { 0.0 };
                    }
                }
                vec![(*a, da)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut r = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    r.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
                r
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                let mut r = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, w) = dims(p)?;
                    let dp = g.chunks(on).flat_map(|row| row[col..col + w].iter().copied()).collect();
                    r.push((p, dp));
                    col += w;
                }
                r
            }
            Op::SliceRows { x, start } => {
                let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                dx[start * on..start * on + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims(*x)?;
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + on].copy_from_slice(&g[i * on..(i + 1) * on]);
                }
                vec![(*x, dx)]
            }
            Op::RepeatRows { x, times } => {
                let (m, n) = dims(*x)?;
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        let s: f64 = (0..*times).map(|t| g[(i * times + t) * n + j] as f64).sum();
                        dx.push(s as f32);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Transpose(a) => vec![(*a, kernels::transpose(g, om, on))],
            Op::MeanRowGroups { x, group } => {
                let inv = 1.0 / *group as f32;
                let dx = g
                    .chunks(on)
                    .flat_map(|row| std::iter::repeat_n(row, *group).flatten().map(move |v| v * inv))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::Gather { table, ids } => {
                let (m, n) = dims(*table)?;
                let mut dt = vec![0.0f32; m * n];
                for (r, &i) in ids.iter().enumerate() {
                    dt[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(d, v)| *d += v);
                }
                vec![(*table, dt)]
            }
            Op::AddToLeadingCols { x, s, ncols } => {
                let ds: f64 = g
                    .chunks(on)
                    .flat_map(|row| row[..*ncols].iter())
                    .map(|&v| v as f64)
                    .sum();
                vec![(*x, g.to_vec()), (*s, vec![ds as f32])]
            }
            Op::LogSoftmaxNll { logits, labels, probs } => {
                let (m, n) = dims(*logits)?;
                let scale = g[0] / m as f32;
                let mut dl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * n + y] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, dl)]
            }
        };
        Ok(grads)
    }
}

fn column_sums(g: &[f32], m: usize, n: usize) -> Vec<f32> {
    (0..n)
        .map(|j| (0..m).map(|i| g[i * n + j] as f64).sum::<f64>() as f32)
        .collect()
}
