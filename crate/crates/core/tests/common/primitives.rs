//! One seeded gradient-check case per autodiff primitive.

use fishtune::{Graph, Result, Tensor, Var};
use rand::Rng;

use super::{away_from_zero, gradcheck, gradcheck_positive, rng, uniform};

pub struct Case {
    pub name: &'static str,
    /// Check with all-positive objective weights (see [`gradcheck_positive`]).
    pub positive: bool,
    pub inputs: fn(u64) -> Vec<Tensor>,
    pub build: fn(&mut Graph, &[Var]) -> Result<Var>,
}

impl Case {
    /// Worst relative error over `seeds`.
    pub fn worst_error(&self, seeds: std::ops::Range<u64>) -> f64 {
        seeds
            .map(|s| {
                let xs = (self.inputs)(s);
                if self.positive {
                    gradcheck_positive(self.build, &xs, s)
                } else {
                    gradcheck(self.build, &xs, s)
                }
            })
            .fold(0.0, f64::max)
    }
}

pub fn dims(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

fn one_matrix(s: u64) -> Vec<Tensor> {
    let (m, n, _) = dims(s);
    vec![uniform(&mut rng(s), m, n, -2.0, 2.0)]
}

fn same_shape_pair(s: u64) -> Vec<Tensor> {
    let (m, n, _) = dims(s);
    let mut r = rng(s);
    vec![uniform(&mut r, m, n, -1.0, 1.0), uniform(&mut r, m, n, -1.0, 1.0)]
}

fn matrix_and_row(s: u64) -> Vec<Tensor> {
    let (m, n, _) = dims(s);
    let mut r = rng(s);
    vec![uniform(&mut r, m, n, -1.0, 1.0), away_from_zero(&mut r, 1, n, 0.5, 1.5)]
}

const fn case(name: &'static str, inputs: fn(u64) -> Vec<Tensor>, build: fn(&mut Graph, &[Var]) -> Result<Var>) -> Case {
    Case { name, positive: false, inputs, build }
}

pub fn cases() -> Vec<Case> {
    vec![
        case(
            "matmul",
            |s| {
                let (m, n, p) = dims(s);
                let mut r = rng(s);
                vec![uniform(&mut r, m, n, -1.0, 1.0), uniform(&mut r, n, p, -1.0, 1.0)]
            },
            |g, v| g.matmul(v[0], v[1]),
        ),
        case("add", same_shape_pair, |g, v| g.add(v[0], v[1])),
        case("sub", same_shape_pair, |g, v| g.sub(v[0], v[1])),
        case("hadamard", same_shape_pair, |g, v| g.hadamard(v[0], v[1])),
        case("add_row", matrix_and_row, |g, v| g.add_row(v[0], v[1])),
        case("mul_row", matrix_and_row, |g, v| g.mul_row(v[0], v[1])),
        case("div_row", matrix_and_row, |g, v| g.div_row(v[0], v[1])),
        case(
            "mul_col",
            |s| {
                let (m, n, _) = dims(s);
                let mut r = rng(s);
                vec![uniform(&mut r, m, n, -1.0, 1.0), uniform(&mut r, m, 1, -1.0, 1.0)]
            },
            |g, v| g.mul_col(v[0], v[1]),
        ),
        // The scalar's gradient sums every output; mixed signs cancel it below resolution.
        Case {
            positive: true,
            ..case(
                "mul_scalar",
                |s| {
                    let (m, n, _) = dims(s);
                    let mut r = rng(s);
                    vec![uniform(&mut r, m, n, 0.2, 1.0), uniform(&mut r, 1, 1, -2.0, 2.0)]
                },
                |g, v| g.mul_scalar(v[0], v[1]),
            )
        },
        case(
            "add_to_leading_cols",
            |s| {
                let (m, n, _) = dims(s);
                let mut r = rng(s);
                vec![uniform(&mut r, m, n + 1, -1.0, 1.0), uniform(&mut r, 1, 1, -1.0, 1.0)]
            },
            |g, v| {
                let n = g.value(v[0]).cols();
                g.add_to_leading_cols(v[0], v[1], n - 1)
            },
        ),
        case("scale", one_matrix, |g, v| g.scale(v[0], -1.7)),
        case(
            "relu",
            |s| {
                let (m, n, _) = dims(s);
                vec![away_from_zero(&mut rng(s), m, n, 0.05, 2.0)]
            },
            |g, v| g.relu(v[0]),
        ),
        case("gelu", one_matrix, |g, v| g.gelu(v[0])),
        case("sigmoid", one_matrix, |g, v| g.sigmoid(v[0])),
        case("log_sigmoid", one_matrix, |g, v| g.log_sigmoid(v[0])),
        case("transpose", one_matrix, |g, v| g.transpose(v[0])),
        case("sum", one_matrix, |g, v| g.sum(v[0])),
        case("repeat_rows", one_matrix, |g, v| g.repeat_rows(v[0], 3)),
        case("softmax", one_matrix, |g, v| g.softmax(v[0])),
        case(
            "layer_norm",
            |s| {
                let (m, n, _) = dims(s);
                vec![uniform(&mut rng(s), m, n + 2, -2.0, 2.0)]
            },
            |g, v| g.layer_norm(v[0]),
        ),
        case(
            "column_l2_norm",
            |s| {
                let (m, n, _) = dims(s);
                vec![away_from_zero(&mut rng(s), m, n, 0.2, 1.0)]
            },
            |g, v| g.column_l2_norm(v[0]),
        ),
        case(
            "concat_rows",
            |s| {
                let (m, n, p) = dims(s);
                let mut r = rng(s);
                vec![uniform(&mut r, m, n, -1.0, 1.0), uniform(&mut r, p, n, -1.0, 1.0)]
            },
            |g, v| g.concat_rows(&[v[0], v[1]]),
        ),
        case(
            "concat_cols",
            |s| {
                let (m, n, p) = dims(s);
                let mut r = rng(s);
                vec![uniform(&mut r, m, n, -1.0, 1.0), uniform(&mut r, m, p, -1.0, 1.0)]
            },
            |g, v| g.concat_cols(&[v[0], v[1]]),
        ),
        case(
            "slice_rows",
            |s| {
                let (m, n, _) = dims(s);
                vec![uniform(&mut rng(s), m + 2, n, -1.0, 1.0)]
            },
            |g, v| {
                let m = g.value(v[0]).rows();
                g.slice_rows(v[0], 1, m - 2)
            },
        ),
        case(
            "slice_cols",
            |s| {
                let (m, n, _) = dims(s);
                vec![uniform(&mut rng(s), m, n + 2, -1.0, 1.0)]
            },
            |g, v| {
                let n = g.value(v[0]).cols();
                g.slice_cols(v[0], 1, n - 1)
            },
        ),
        case(
            "mean_row_groups",
            |s| {
                let (m, n, _) = dims(s);
                vec![uniform(&mut rng(s), 3 * m, n, -1.0, 1.0)]
            },
            |g, v| g.mean_row_groups(v[0], 3),
        ),
        case(
            "gather_rows",
            |s| {
                let (m, n, _) = dims(s);
                vec![uniform(&mut rng(s), m + 1, n, -1.0, 1.0)]
            },
            |g, v| {
                let m = g.value(v[0]).rows();
                let ids: Vec<usize> = (0..2 * m).map(|i| (i * 7 + 1) % m).collect();
                g.gather_rows(v[0], &ids)
            },
        ),
        case(
            "log_softmax_nll",
            |s| {
                let (m, n, _) = dims(s);
                vec![uniform(&mut rng(s), m, n + 1, -3.0, 3.0)]
            },
            |g, v| {
                let (m, n) = (g.value(v[0]).rows(), g.value(v[0]).cols());
                let labels: Vec<usize> = (0..m).map(|i| (3 * i + 1) % n).collect();
                g.log_softmax_nll(v[0], &labels)
            },
        ),
    ]
}
