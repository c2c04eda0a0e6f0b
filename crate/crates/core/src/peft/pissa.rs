//! Principal-singular-component initialization of low-rank factors.

use nalgebra::DMatrix;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const SVD_EPS: f64 = 1e-12;
const SVD_MAX_ITERS: usize = 10_000;

/// Splits `w0 [d×k]` into a rank-`r` principal part `b·a` and a residual.
///
/// With the truncated SVD `w0 ≈ U_r S_r V_rᵀ`, returns `b = U_r √S_r`,
/// `a = √S_r V_rᵀ` and `w_res = w0 − b·a`, so `w_res + b·a` reproduces `w0`.
pub fn pissa_init(w0: &Tensor, r: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, k) = w0.dims2()?;
    if r == 0 || r > d.min(k) {
        return Err(Error::config(format!("pissa rank {r} must be in 1..={}", d.min(k))));
    }
    let m = DMatrix::from_row_iterator(d, k, w0.data().iter().map(|&v| v as f64));
    let svd = nalgebra::SVD::try_new(m.clone(), true, true, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::numeric(format!("SVD of a {d}×{k} weight did not converge")))?;
    let u = svd.u.as_ref().expect("U requested");
    let v_t = svd.v_t.as_ref().expect("Vᵀ requested");

    let mut b = vec![0.0f32; d * r];
    let mut a = vec![0.0f32; r * k];
    let mut principal = DMatrix::<f64>::zeros(d, k);
    for c in 0..r {
        let root = svd.singular_values[c].sqrt();
        for i in 0..d {
            b[i * r + c] = (u[(i, c)] * root) as f32;
        }
        for j in 0..k {
            a[c * k + j] = (v_t[(c, j)] * root) as f32;
        }
    }
    // Residual against the f32-rounded factors so that w_res + b·a is as tight as possible.
    for i in 0..d {
        for j in 0..k {
            principal[(i, j)] = (0..r).map(|c| b[i * r + c] as f64 * a[c * k + j] as f64).sum();
        }
    }
    let residual = (&m - principal).iter().copied().collect::<Vec<_>>();
    // DMatrix iterates column-major.
    let mut w_res = vec![0.0f32; d * k];
    for j in 0..k {
        for i in 0..d {
            w_res[i * k + j] = residual[j * d + i] as f32;
        }
    }
    Ok((
        Tensor::matrix(d, r, b),
        Tensor::matrix(r, k, a),
        Tensor::matrix(d, k, w_res),
    ))
}
