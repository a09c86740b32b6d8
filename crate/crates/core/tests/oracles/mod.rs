//! Independent reference computations used by the integration tests and by
//! the acceptance harness. Nothing here calls into the code under test except
//! to build inputs.
#![allow(dead_code)]

use prefrank_core::diffcore::{Graph, NodeId, Tensor};
use prefrank_core::seed;
use rand::Rng;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + h;
            let up = f(&x);
            x[i] = v - h;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Nodes and weights of `n`-point Gauss–Hermite quadrature for
/// `∫ f(t) e^{−t²} dt`, by Newton iteration on the orthonormal recurrence.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut out = vec![(0.0, 0.0); n];
    let m = n.div_ceil(2);
    let mut z: f64 = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * out[0].0,
            3 => 1.91 * z - 0.91 * out[1].0,
            _ => 2.0 * z - out[i - 2].0,
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / (pp * pp);
        out[i] = (z, w);
        out[n - 1 - i] = (-z, w);
    }
    out
}

/// `E[sigm(y_A − y_B)]` for independent Gaussian ratings, by quadrature over
/// the Gaussian difference.
pub fn win_probability_quadrature(mu_a: f64, sd_a: f64, mu_b: f64, sd_b: f64, points: usize) -> f64 {
    let m = mu_a - mu_b;
    let s = (sd_a * sd_a + sd_b * sd_b).sqrt();
    let norm = std::f64::consts::PI.sqrt();
    gauss_hermite(points)
        .iter()
        .map(|(t, w)| w * logistic(m + s * std::f64::consts::SQRT_2 * t))
        .sum::<f64>()
        / norm
}

/// CDF of the difference of two independent `Uniform(−w, w)` draws
/// (triangular on `[−2w, 2w]`).
pub fn triangle_cdf(z: f64, w: f64) -> f64 {
    let a = 2.0 * w;
    if z <= -a {
        0.0
    } else if z <= 0.0 {
        (z + a).powi(2) / (2.0 * a * a)
    } else if z < a {
        1.0 - (a - z).powi(2) / (2.0 * a * a)
    } else {
        1.0
    }
}

/// Probability that an annotator with tie margin `m` and noise half-width `w`
/// reports a tie for a true gap `g`.
pub fn tie_probability(g: f64, m: f64, w: f64) -> f64 {
    if w == 0.0 {
        return if g.abs() <= m { 1.0 } else { 0.0 };
    }
    triangle_cdf(m - g, w) - triangle_cdf(-m - g, w)
}

/// Ranking loss recomputed from recorded samples `[pair][m]`.
pub fn replay_rank_loss(samples_a: &[Vec<f64>], samples_b: &[Vec<f64>], scores: &[f64], ub: bool) -> f64 {
    let clamp = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    let mut total = 0.0;
    for ((ya, yb), s) in samples_a.iter().zip(samples_b).zip(scores) {
        let m = ya.len() as f64;
        let probs: Vec<f64> = ya.iter().zip(yb).map(|(a, b)| logistic(a - b)).collect();
        total += if ub {
            probs
                .iter()
                .map(|p| s * clamp(*p).ln() + (1.0 - s) * clamp(1.0 - p).ln())
                .sum::<f64>()
                / m
        } else {
            let p = probs.iter().sum::<f64>() / m;
            s * clamp(p).ln() + (1.0 - s) * clamp(1.0 - p).ln()
        };
    }
    -total / scores.len() as f64
}

/// `(mean, epistemic, aleatoric)` from recorded passes, with the textbook
/// `E[μ²] − E[μ]²` form.
pub fn predictive_moments(passes: &[(f64, f64)]) -> (f64, f64, f64) {
    let t = passes.len() as f64;
    let mean = passes.iter().map(|p| p.0).sum::<f64>() / t;
    let sq = passes.iter().map(|p| p.0 * p.0).sum::<f64>() / t;
    let ale = passes.iter().map(|p| p.1 * p.1).sum::<f64>() / t;
    (mean, sq - mean * mean, ale)
}

/// Shape-preserving operations used to build random graphs.
#[derive(Clone, Copy, Debug)]
pub enum RandomOp {
    MatMul(usize),
    Add(usize),
    AddRow(usize),
    Sub(usize),
    Mul(usize),
    Scale(f64),
    Offset(f64),
    Sigmoid,
    Softplus,
    LogSoftplus,
    Square,
    Leaky,
    MeanColsTiled,
    SumColsTiled,
    ConcatSlice(usize),
}

/// A random graph over `params`: each step combines the running node with
/// another parameter, and the output is `Σ weights ⊙ node`.
#[derive(Clone, Debug)]
pub struct GraphRecipe {
    pub rows: usize,
    pub cols: usize,
    pub shapes: Vec<(usize, usize)>,
    pub ops: Vec<RandomOp>,
    pub weights: Vec<f64>,
}

impl GraphRecipe {
    pub fn random(seed_value: u64) -> (Self, Vec<Vec<f64>>) {
        let mut rng = seed::rng(seed_value);
        let rows = rng.random_range(1..4);
        let cols = rng.random_range(1..4);
        // param 0: running input; 1: same shape; 2: square; 3: row
        let shapes = vec![(rows, cols), (rows, cols), (cols, cols), (1, cols)];
        let mut ops = Vec::new();
        for _ in 0..rng.random_range(3..9) {
            ops.push(match rng.random_range(0..15) {
                0 => RandomOp::MatMul(2),
                1 => RandomOp::Add(1),
                2 => RandomOp::AddRow(3),
                3 => RandomOp::Sub(1),
                4 => RandomOp::Mul(1),
                5 => RandomOp::Scale(rng.random_range(-2.0..2.0)),
                6 => RandomOp::Offset(rng.random_range(-1.0..1.0)),
                7 => RandomOp::Sigmoid,
                8 => RandomOp::Softplus,
                9 => RandomOp::LogSoftplus,
                10 => RandomOp::Square,
                11 => RandomOp::Leaky,
                12 => RandomOp::MeanColsTiled,
                13 => RandomOp::SumColsTiled,
                _ => RandomOp::ConcatSlice(1),
            });
        }
        let weights = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values = shapes
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        (
            Self {
                rows,
                cols,
                shapes,
                ops,
                weights,
            },
            values,
        )
    }

    /// Builds the graph; returns the scalar output and the parameter handles.
    pub fn build(&self, g: &mut Graph, values: &[Vec<f64>]) -> (NodeId, Vec<NodeId>) {
        let params: Vec<NodeId> = self
            .shapes
            .iter()
            .zip(values)
            .map(|(&(r, c), v)| g.param(Tensor::matrix(r, c, v.clone()).unwrap()).unwrap())
            .collect();
        let mut h = params[0];
        for op in &self.ops {
            h = match *op {
                RandomOp::MatMul(p) => g.matmul(h, params[p]).unwrap(),
                RandomOp::Add(p) => g.add(h, params[p]).unwrap(),
                RandomOp::AddRow(p) => g.add_row(h, params[p]).unwrap(),
                RandomOp::Sub(p) => g.sub(h, params[p]).unwrap(),
                RandomOp::Mul(p) => g.mul(h, params[p]).unwrap(),
                RandomOp::Scale(c) => g.scale(h, c).unwrap(),
                RandomOp::Offset(c) => g.offset(h, c).unwrap(),
                RandomOp::Sigmoid => g.sigmoid(h).unwrap(),
                RandomOp::Softplus => g.softplus(h).unwrap(),
                RandomOp::LogSoftplus => {
                    let s = g.softplus(h).unwrap();
                    let s = g.offset(s, 0.1).unwrap();
                    g.log(s).unwrap()
                }
                RandomOp::Square => g.square(h).unwrap(),
                RandomOp::Leaky => g.leaky_relu(h, 0.2).unwrap(),
                RandomOp::MeanColsTiled => {
                    let m = g.mean_cols(h).unwrap();
                    let t = g.tile_cols(m, self.cols).unwrap();
                    g.add(t, h).unwrap()
                }
                RandomOp::SumColsTiled => {
                    let m = g.sum_cols(h).unwrap();
                    let t = g.tile_cols(m, self.cols).unwrap();
                    g.mul(t, h).unwrap()
                }
                RandomOp::ConcatSlice(p) => {
                    let c = g.concat_cols(params[p], h).unwrap();
                    g.slice_cols(c, self.cols, 2 * self.cols).unwrap()
                }
            };
        }
        let w = g.input(Tensor::matrix(self.rows, self.cols, self.weights.clone()).unwrap()).unwrap();
        let prod = g.mul(h, w).unwrap();
        (g.sum(prod).unwrap(), params)
    }

    pub fn value(&self, values: &[Vec<f64>]) -> f64 {
        let mut g = Graph::new();
        let (out, _) = self.build(&mut g, values);
        g.value(out).item()
    }
}

/// Largest relative error between autodiff and central differences over
/// every parameter entry of a random graph. Inputs are continuous draws, so
/// leaky-ReLU kinks within `h` of an input have negligible probability.
pub fn graph_gradient_error(seed_value: u64, h: f64) -> f64 {
    let (recipe, values) = GraphRecipe::random(seed_value);
    let mut g = Graph::new();
    let (out, params) = recipe.build(&mut g, &values);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, p) in params.iter().enumerate() {
        let analytic = g.grad(*p).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; values[k].len()]);
        let mut f = |x: &[f64]| {
            let mut v = values.to_vec();
            v[k] = x.to_vec();
            recipe.value(&v)
        };
        let numeric = central_diff(&mut f, &values[k], h);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n, 1e-4));
        }
    }
    worst
}
