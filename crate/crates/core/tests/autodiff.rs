mod common;

use common::primitives::{self, dims};
use common::*;
use fishtune::autodiff::{finite_diff_grad, relative_error};
use fishtune::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const CONFIGS: u64 = 20;

#[test]
fn every_primitive_matches_finite_differences() {
    for case in primitives::cases() {
        let err = case.worst_error(0..CONFIGS);
        assert!(err < GRAD_TOL, "{}: worst relative error {err} over {CONFIGS} seeds", case.name);
    }
}

#[test]
fn sum_backward_gives_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn square_backward_doubles() {
    let mut g = Graph::new();
    let w = g.param(Tensor::row(vec![1.0, -2.0, 3.0]));
    let sq = g.hadamard(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for seed in 0..CONFIGS {
        let mut r = rng(seed);
        // Unit-scale weights keep gradients well above the f32 resolution of the loss.
        let x = uniform(&mut r, 4, 3, -2.0, 2.0);
        let w1 = uniform(&mut r, 3, 5, -2.0, 2.0);
        let b1 = uniform(&mut r, 1, 5, -0.5, 0.5);
        let w2 = uniform(&mut r, 5, 2, -2.0, 2.0);
        let labels = [0usize, 1, 1, 0];
        let build = |g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, v[3])?;
            g.log_softmax_nll(o, &labels)
        };
        let err = gradcheck(build, &[x, w1, b1, w2], seed);
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..10 {
        let (m, n, p) = dims(seed);
        let mut r = rng(seed);
        let a = uniform(&mut r, m, n, -1.0, 1.0);
        let b = uniform(&mut r, n, p, -1.0, 1.0);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..p {
                let want: f64 = (0..n).map(|k| a.at(i, k) as f64 * b.at(k, j) as f64).sum();
                assert!((c.at(i, j) as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(9);
        let mut g = Graph::new();
        let a = g.param(uniform(&mut r, 5, 4, -1.0, 1.0));
        let b = g.param(uniform(&mut r, 4, 3, -1.0, 1.0));
        let c = g.matmul(a, b).unwrap();
        let c = g.softmax(c).unwrap();
        let c = g.layer_norm(c).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(2, 2));
    assert!(g.backward(x).unwrap_err().is_validation());
}

#[test]
fn shape_errors_name_both_operands() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(2, 3));
    let b = g.param(Tensor::zeros(2, 3));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn finite_difference_oracle_on_known_function() {
    let w = Tensor::row(vec![3.0]);
    let g = finite_diff_grad(|t| Ok((t.data()[0] as f64).powi(2)), &w, 1e-3).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-5);
    assert!(relative_error(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
}

proptest! {
    #[test]
    fn hadamard_with_binary_mask_zeroes_or_keeps(
        values in prop::collection::vec(-1e3f32..1e3, 1..40),
        seed in any::<u64>(),
    ) {
        let n = values.len();
        let mut r = rng(seed);
        let bits: Vec<f32> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(values.clone()));
        let m = g.constant(Tensor::row(bits.clone()));
        let y = g.hadamard(x, m).unwrap();
        for i in 0..n {
            let out = g.value(y).data()[i];
            if bits[i] == 1.0 {
                prop_assert_eq!(out.to_bits(), values[i].to_bits());
            } else {
                prop_assert_eq!(out, 0.0);
            }
        }
    }
}
