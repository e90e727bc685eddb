//! Gegenbauer and Hermite machinery on the sphere `S^{d-1}(sqrt d)`, and the
//! analytic feature covariance assembled from Gegenbauer coefficients.
//!
//! Conventions: `Q_k^{(d)}` is the degree-k Gegenbauer polynomial on `[-d, d]`
//! normalized by `Q_k(d) = 1`; `tau` is the law of `<x, e>` for `x` uniform on
//! the sphere of radius `sqrt d`, supported on `[-sqrt d, sqrt d]` with density
//! proportional to `(1 - t^2/d)^{(d-3)/2}`.

mod covariance;
mod dump;
mod quadrature;

pub use covariance::{
    monte_carlo_covariance, sigma_from_coeffs, sigma_from_coeffs_capped, sigma_monte_carlo, Provenance, SigmaMatrix,
    DEFAULT_DENSE_CAP,
};
pub use dump::{read_flat, write_flat, FlatArray, FLAT_MAGIC};
pub use quadrature::{gauss_gegenbauer, HermiteRule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension `B(d, l)` of the degree-l spherical harmonics in `d` dimensions.
pub fn dim_harmonics(d: usize, l: usize) -> Result<u128> {
    if d < 3 {
        return Err(Error::InvalidArgument(format!("d must be >= 3, got {d}")));
    }
    if l == 0 {
        return Ok(1);
    }
    let overflow = || Error::Range(format!("B({d}, {l}) overflows u128"));
    // B(d,l) = (2l + d - 2)/l * C(l + d - 3, l - 1)
    let c = binomial((l + d - 3) as u128, (l - 1) as u128).ok_or_else(overflow)?;
    let num = c.checked_mul((2 * l + d - 2) as u128).ok_or_else(overflow)?;
    debug_assert_eq!(num % l as u128, 0);
    Ok(num / l as u128)
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiply
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// `B(d, l)` in floating point, valid far beyond the integer range.
pub fn dim_harmonics_f64(d: usize, l: usize) -> f64 {
    if l == 0 {
        return 1.0;
    }
    let mut c = 1.0;
    for i in 1..l {
        c *= (d - 2 + i) as f64 / i as f64;
    }
    c * (2 * l + d - 2) as f64 / l as f64
}

/// `n_k = sum_{l <= k} B(d, l)`.
pub fn cumulative_dim(d: usize, k: usize) -> Result<u128> {
    let mut total: u128 = 0;
    for l in 0..=k {
        total = total
            .checked_add(dim_harmonics(d, l)?)
            .ok_or_else(|| Error::Range(format!("n_{k} overflows for d = {d}")))?;
    }
    Ok(total)
}

/// `n_k` as a `usize`, for sizing partitions.
pub fn cumulative_dim_usize(d: usize, k: usize) -> Result<usize> {
    let n = cumulative_dim(d, k)?;
    usize::try_from(n).map_err(|_| Error::Range(format!("n_{k} = {n} does not fit usize")))
}

/// Evaluates `P_0..=P_k` at `x = s/d`, where `P_j(x) = Q_j^{(d)}(d x)` is the
/// dimension-d Legendre polynomial with `P_j(1) = 1`.
pub fn gegenbauer_all(d: usize, k: usize, s: f64, out: &mut Vec<f64>) {
    out.clear();
    let x = s / d as f64;
    out.push(1.0);
    if k == 0 {
        return;
    }
    out.push(x);
    let dd = d as f64;
    for j in 1..k {
        let jf = j as f64;
        let next = ((2.0 * jf + dd - 2.0) * x * out[j] - jf * out[j - 1]) / (jf + dd - 2.0);
        out.push(next);
    }
}

/// `Q_k^{(d)}(s)` for `s` in `[-d, d]` (extrapolation permitted).
pub fn gegenbauer_eval(d: usize, k: usize, s: f64) -> f64 {
    let mut buf = Vec::with_capacity(k + 1);
    gegenbauer_all(d, k, s, &mut buf);
    buf[k]
}

/// Normalized probabilists' Hermite polynomial `h_k`, orthonormal under N(0,1).
pub fn hermite_fn(k: usize, z: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = z;
    for j in 1..k {
        let jf = j as f64;
        let next = (z * cur - jf.sqrt() * prev) / (jf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// `mu_k(f) = E_{z ~ N(0,1)}[f(z) h_k(z)]` by Gauss-Hermite quadrature.
pub fn hermite_coeff(f: impl Fn(f64) -> f64, k: usize) -> f64 {
    HermiteRule::new(HermiteRule::DEFAULT_NODES).coeff(f, k)
}

/// Quadrature for the projection measure `tau` in dimension `d`, plus the
/// truncation order used when expanding scalar functions.
#[derive(Debug, Clone)]
pub struct HarmonicsContext {
    pub d: usize,
    pub truncation: usize,
    /// Nodes in `t`-space, on `[-sqrt d, sqrt d]`.
    pub nodes: Vec<f64>,
    /// Probability weights, summing to one.
    pub weights: Vec<f64>,
    /// `B(d, k)` for `k <= truncation`.
    pub dims: Vec<f64>,
    /// Tail fraction of `||f||^2` above which expansion is rejected.
    pub max_tail_fraction: f64,
}

impl HarmonicsContext {
    pub const DEFAULT_NODES: usize = 256;
    pub const DEFAULT_MAX_TAIL: f64 = 0.1;

    pub fn new(d: usize, truncation: usize) -> Result<Self> {
        Self::with_nodes(d, truncation, Self::DEFAULT_NODES)
    }

    /// Default truncation `4k + 4` for a degree-k task.
    pub fn for_task(d: usize, k: usize) -> Result<Self> {
        Self::new(d, 4 * k + 4)
    }

    pub fn with_nodes(d: usize, truncation: usize, nodes: usize) -> Result<Self> {
        if d < 3 {
            return Err(Error::InvalidArgument(format!("d must be >= 3, got {d}")));
        }
        if nodes == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
        }
        let (s, weights) = gauss_gegenbauer(d, nodes);
        let root = (d as f64).sqrt();
        let nodes = s.iter().map(|v| v * root).collect();
        let dims = (0..=truncation).map(|k| dim_harmonics_f64(d, k)).collect();
        Ok(Self {
            d,
            truncation,
            nodes,
            weights,
            dims,
            max_tail_fraction: Self::DEFAULT_MAX_TAIL,
        })
    }

    /// `E_tau[f]` by quadrature.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

/// Gegenbauer coefficients `lambda_{d,k}(f) = <f, Q_k(sqrt d .)>_tau` for
/// `k <= K`, together with the quadrature norm used for the Parseval check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GegenbauerSeries {
    pub d: usize,
    pub coeffs: Vec<f64>,
    /// `||f||^2_{L^2(tau)}` from the same quadrature.
    pub norm_sq: f64,
    /// Optional Hermite coefficients `mu_k(f)` for comparison.
    #[serde(default)]
    pub hermite: Option<Vec<f64>>,
}

impl GegenbauerSeries {
    pub fn truncation(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    /// `sum_k B(d,k) lambda_k^2`.
    pub fn captured(&self) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| dim_harmonics_f64(self.d, k) * c * c)
            .sum()
    }

    /// `||f||^2 - captured`, clamped at zero.
    pub fn tail_mass(&self) -> f64 {
        (self.norm_sq - self.captured()).max(0.0)
    }

    /// Evaluates the truncated expansion `sum_k lambda_k B(d,k) Q_k(sqrt d t)`.
    pub fn eval(&self, t: f64) -> f64 {
        let mut buf = Vec::with_capacity(self.coeffs.len());
        gegenbauer_all(self.d, self.truncation(), (self.d as f64).sqrt() * t, &mut buf);
        self.coeffs
            .iter()
            .zip(&buf)
            .enumerate()
            .map(|(k, (c, q))| c * dim_harmonics_f64(self.d, k) * q)
            .sum()
    }

    pub fn with_hermite(mut self, f: impl Fn(f64) -> f64) -> Self {
        let rule = HermiteRule::new(HermiteRule::DEFAULT_NODES);
        self.hermite = Some((0..self.coeffs.len()).map(|k| rule.coeff(&f, k)).collect());
        self
    }
}

/// Expands a bounded scalar function in Gegenbauer polynomials under `tau`.
pub fn gegenbauer_coeffs(f: impl Fn(f64) -> f64, ctx: &HarmonicsContext) -> Result<GegenbauerSeries> {
    let series = gegenbauer_coeffs_unchecked(f, ctx);
    let tail = series.tail_mass();
    let limit = ctx.max_tail_fraction * series.norm_sq;
    if series.norm_sq > 0.0 && tail > limit {
        return Err(Error::Truncation { tail, limit });
    }
    Ok(series)
}

/// As [`gegenbauer_coeffs`] without the tail-mass guard.
pub fn gegenbauer_coeffs_unchecked(f: impl Fn(f64) -> f64, ctx: &HarmonicsContext) -> GegenbauerSeries {
    let k_max = ctx.truncation;
    let mut coeffs = vec![0.0; k_max + 1];
    let mut norm_sq = 0.0;
    let root = (ctx.d as f64).sqrt();
    let mut buf = Vec::with_capacity(k_max + 1);
    for (&t, &w) in ctx.nodes.iter().zip(&ctx.weights) {
        let v = f(t);
        norm_sq += w * v * v;
        gegenbauer_all(ctx.d, k_max, root * t, &mut buf);
        for (c, q) in coeffs.iter_mut().zip(&buf) {
            *c += w * v * q;
        }
    }
    GegenbauerSeries { d: ctx.d, coeffs, norm_sq, hermite: None }
}

/// Precomputed products `lambda_k(f) lambda_k(g) B(d,k)` so the kernel can be
/// evaluated at many inner products cheaply.
#[derive(Debug, Clone)]
pub struct KernelSeries {
    d: usize,
    weights: Vec<f64>,
}

impl KernelSeries {
    pub fn new(fs: &GegenbauerSeries, gs: &GegenbauerSeries) -> Result<Self> {
        if fs.d != gs.d || fs.coeffs.len() != gs.coeffs.len() {
            return Err(Error::InvalidArgument(format!(
                "series disagree: d {} vs {}, K {} vs {}",
                fs.d,
                gs.d,
                fs.truncation(),
                gs.truncation()
            )));
        }
        let weights = fs
            .coeffs
            .iter()
            .zip(&gs.coeffs)
            .enumerate()
            .map(|(k, (a, b))| a * b * dim_harmonics_f64(fs.d, k))
            .collect();
        Ok(Self { d: fs.d, weights })
    }

    /// `E[f(theta1^T x) g(theta2^T x)]` for unit vectors with `theta1^T theta2 = t`.
    pub fn eval(&self, t: f64, buf: &mut Vec<f64>) -> f64 {
        let k = self.weights.len() - 1;
        gegenbauer_all(self.d, k, self.d as f64 * t, buf);
        self.weights.iter().zip(buf.iter()).map(|(w, q)| w * q).sum()
    }
}

/// `sum_k lambda_k(f) lambda_k(g) B(d,k) Q_k(d t)`.
pub fn scalar_kernel(fs: &GegenbauerSeries, gs: &GegenbauerSeries, t: f64) -> Result<f64> {
    let ks = KernelSeries::new(fs, gs)?;
    Ok(ks.eval(t, &mut Vec::new()))
}
