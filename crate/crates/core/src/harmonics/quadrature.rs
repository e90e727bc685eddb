use std::sync::OnceLock;

use ndarray::Array2;

use crate::linalg::sym_eigen_desc;

/// Golub-Welsch: nodes and normalized weights of the Gauss rule whose monic
/// recurrence has zero diagonal and off-diagonal squares `beta[1..n]`.
fn golub_welsch_symmetric(n: usize, beta: impl Fn(usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut jac = Array2::zeros((n, n));
    for i in 1..n {
        let b = beta(i).sqrt();
        jac[[i, i - 1]] = b;
        jac[[i - 1, i]] = b;
    }
    let eig = sym_eigen_desc(jac.view());
    // ascending order for nodes
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| (eig.values[j], eig.vectors[[0, j]].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // symmetrize: the exact rule is symmetric about zero
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    (nodes, weights)
}

/// Gauss rule on `[-1, 1]` for the probability density proportional to
/// `(1 - s^2)^{(d-3)/2}` (Gauss-Gegenbauer with `lambda = (d-2)/2`).
pub fn gauss_gegenbauer(d: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let lambda = (d as f64 - 2.0) / 2.0;
    golub_welsch_symmetric(n, |k| {
        let k = k as f64;
        k * (k + 2.0 * lambda - 1.0) / (4.0 * (k + lambda) * (k + lambda - 1.0))
    })
}

/// Gauss-Hermite rule for the standard Gaussian.
#[derive(Debug, Clone)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

static DEFAULT_RULE: OnceLock<HermiteRule> = OnceLock::new();

impl HermiteRule {
    pub const DEFAULT_NODES: usize = 160;

    pub fn new(n: usize) -> Self {
        if n == Self::DEFAULT_NODES {
            return DEFAULT_RULE.get_or_init(|| Self::build(n)).clone();
        }
        Self::build(n)
    }

    fn build(n: usize) -> Self {
        let (nodes, weights) = golub_welsch_symmetric(n, |k| k as f64);
        Self { nodes, weights }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }

    pub fn coeff(&self, f: impl Fn(f64) -> f64, k: usize) -> f64 {
        self.integrate(|z| f(z) * super::hermite_fn(k, z))
    }
}
