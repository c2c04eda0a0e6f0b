//! Numerical gradient oracle, independent of the graph's backward pass.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central differences `(f(w + h·eᵢ) − f(w − h·eᵢ)) / 2h` for every coordinate of `w`.
pub fn finite_diff_grad<F>(mut f: F, w: &Tensor, step: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = w.clone();
    let mut grad = Vec::with_capacity(w.numel());
    for i in 0..w.numel() {
        let orig = w.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "objective is not finite at coordinate {i} ({plus}, {minus})"
            )));
        }
        // Use the step actually realized in f32 arithmetic.
        let h = ((orig + step) as f64) - ((orig - step) as f64);
        grad.push(((plus - minus) / h) as f32);
    }
    Tensor::new(w.shape().to_vec(), grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
