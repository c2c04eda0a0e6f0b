use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense row-major array of `f32` with an optional gradient slot.
///
/// Every operation in this crate works on rank-2 tensors; a scalar is `[1, 1]`
/// and a vector is a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a `rows × cols` matrix. Panics if `data` has the wrong length.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Tensor::new(vec![rows, cols], data).expect("matrix data length must equal rows * cols")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor::matrix(rows, cols, vec![1.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f32) -> Self {
        Tensor::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::matrix(1, 1, vec![value])
    }

    pub fn row(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::matrix(1, n, data)
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Tensor::matrix(rows, cols, data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f32]) {
        match &mut self.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::contract(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let (n2, p) = other.dims2()?;
        if n != n2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::matrix(m, p, kernels::matmul(&self.data, &other.data, m, n, p)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        Ok(Tensor::matrix(n, m, kernels::transpose(&self.data, m, n)))
    }

    /// Bitwise equality of payloads, distinguishing `-0.0` from `0.0` and NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest elementwise absolute difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Reduction kernels. All sums run left to right in `f64` and round once.
pub(crate) mod kernels {
    /// `[m×n] · [n×p]`.
    pub fn matmul(a: &[f32], b: &[f32], m: usize, n: usize, p: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * p];
        let mut acc = vec![0.0f64; p];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let arow = &a[i * n..(i + 1) * n];
            for (k, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                let brow = &b[k * p..(k + 1) * p];
                for (s, &bv) in acc.iter_mut().zip(brow) {
                    *s += av * bv as f64;
                }
            }
            for (o, s) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
                *o = *s as f32;
            }
        }
        out
    }

    /// `[m×n] · [p×n]ᵀ`.
    pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, n: usize, p: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * p];
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for j in 0..p {
                let brow = &b[j * n..(j + 1) * n];
                let s: f64 = arow
                    .iter()
                    .zip(brow)
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                out[i * p + j] = s as f32;
            }
        }
        out
    }

    /// `[n×m]ᵀ · [n×p]`.
    pub fn matmul_at(a: &[f32], b: &[f32], n: usize, m: usize, p: usize) -> Vec<f32> {
        let mut acc = vec![0.0f64; m * p];
        for k in 0..n {
            let arow = &a[k * m..(k + 1) * m];
            let brow = &b[k * p..(k + 1) * p];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                for (s, &bv) in acc[i * p..(i + 1) * p].iter_mut().zip(brow) {
                    *s += av * bv as f64;
                }
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    pub fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }

    pub fn sum(xs: &[f32]) -> f32 {
        xs.iter().map(|&x| x as f64).sum::<f64>() as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(eye.matmul(&b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn dot_product_matmul() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]);
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect();
        // a: 2x3, b: 4x3
        let bt = kernels::transpose(&b, 4, 3);
        assert_eq!(kernels::matmul_bt(&a, &b, 2, 3, 4), kernels::matmul(&a, &bt, 2, 3, 4));
        // a: 3x2 viewed transposed against c: 3x4
        let c = bt;
        let at = kernels::transpose(&a, 3, 2);
        assert_eq!(kernels::matmul_at(&a, &c, 3, 2, 4), kernels::matmul(&at, &c, 2, 3, 4));
    }
}
