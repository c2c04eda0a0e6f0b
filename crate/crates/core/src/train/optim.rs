use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::SparsityMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Optimizer hyperparameters plus per-coordinate state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Learning rate for the next step; the training loop rewrites it per step.
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    pub step_count: u64,
    first_moment: Vec<f32>,
    second_moment: Vec<f32>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize, lr: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        let moments = if kind == OptimizerKind::Adamw { len } else { 0 };
        Ok(OptimizerState {
            kind,
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        })
    }

    pub fn sgd(len: usize, lr: f32) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, len, lr, 0.0)
    }

    pub fn adamw(len: usize, lr: f32, weight_decay: f32) -> Result<Self> {
        Self::new(OptimizerKind::Adamw, len, lr, weight_decay)
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.second_moment
    }
}

/// One optimizer update of `params`.
///
/// With a mask, gradients are masked before any moment update, weight decay
/// touches only kept coordinates and dropped coordinates are never written.
/// Nothing is modified if any new value would be non-finite.
pub fn step(
    params: &mut [f32],
    grads: &[f32],
    mask: Option<&SparsityMask>,
    state: &mut OptimizerState,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n {
        return Err(Error::contract(format!("gradient length {} != parameter length {n}", grads.len())));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::contract(format!("mask length {} != parameter length {n}", m.len())));
        }
    }
    if state.kind == OptimizerKind::Adamw && state.first_moment.len() != n {
        return Err(Error::contract(format!(
            "optimizer state covers {} coordinates, parameters have {n}",
            state.first_moment.len()
        )));
    }
    let masked;
    let grads = match mask {
        Some(m) => {
            masked = crate::fisher::mask_gradients(grads, m)?;
            &masked[..]
        }
        None => grads,
    };
    let keep = |i: usize| mask.is_none_or(|m| m.bits()[i]);

    let t = state.step_count + 1;
    let lr = state.lr as f64;
    let mut new_params = params.to_vec();
    let mut new_m = state.first_moment.clone();
    let mut new_v = state.second_moment.clone();
    match state.kind {
        OptimizerKind::Sgd => {
            for i in (0..n).filter(|&i| keep(i)) {
                new_params[i] = (params[i] as f64 - lr * grads[i] as f64) as f32;
            }
        }
        OptimizerKind::Adamw => {
            let (b1, b2) = (state.betas.0 as f64, state.betas.1 as f64);
            let c1 = 1.0 - b1.powi(t as i32);
            let c2 = 1.0 - b2.powi(t as i32);
            let eps = state.eps as f64;
            let wd = state.weight_decay as f64;
            for i in (0..n).filter(|&i| keep(i)) {
                let g = grads[i] as f64;
                let m = b1 * new_m[i] as f64 + (1.0 - b1) * g;
                let v = b2 * new_v[i] as f64 + (1.0 - b2) * g * g;
                new_m[i] = m as f32;
                new_v[i] = v as f32;
                let p = params[i] as f64;
                let update = (m / c1) / ((v / c2).sqrt() + eps) + wd * p;
                new_params[i] = (p - lr * update) as f32;
            }
        }
    }
    if let Some(i) = new_params.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite update at coordinate {i}")));
    }
    params.copy_from_slice(&new_params);
    state.first_moment = new_m;
    state.second_moment = new_v;
    state.step_count = t;
    Ok(())
}
