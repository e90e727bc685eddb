use ndarray::{s, Array2, ArrayView2};

use super::{gegenbauer_coeffs, HarmonicsContext, KernelSeries};
use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, solve3};
use crate::model::{Activation, NetworkInit};
use crate::rng::{self, streams};
use crate::spectral::featurize_batch;
use crate::tasks::sample_sphere_with;

/// Largest `m*d` for which the covariance is materialized densely.
pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Debug, Clone)]
pub enum Provenance {
    Analytic {
        truncation: usize,
        /// Worst Parseval tail among the three expanded functions.
        tail_mass: f64,
    },
    MonteCarlo {
        samples: usize,
        seed: u64,
        /// Per-entry standard error of the sample mean.
        std_err: Option<Array2<f64>>,
    },
}

/// Dense `md x md` feature covariance, `d x d` blocks indexed by neuron pairs.
#[derive(Debug, Clone)]
pub struct SigmaMatrix {
    pub matrix: Array2<f64>,
    pub d: usize,
    pub m: usize,
    pub provenance: Provenance,
}

impl SigmaMatrix {
    pub fn dim(&self) -> usize {
        self.d * self.m
    }

    pub fn block(&self, i: usize, j: usize) -> ArrayView2<'_, f64> {
        let d = self.d;
        self.matrix.slice(s![i * d..(i + 1) * d, j * d..(j + 1) * d])
    }

    pub fn asymmetry(&self) -> f64 {
        max_asymmetry(self.matrix.view())
    }

    pub fn std_err(&self) -> Option<&Array2<f64>> {
        match &self.provenance {
            Provenance::MonteCarlo { std_err, .. } => std_err.as_ref(),
            Provenance::Analytic { .. } => None,
        }
    }

    /// Checks the `[S, -S; -S, S]` layout exactly (bitwise), as produced by a
    /// symmetric initialization.
    pub fn has_symmetric_block_layout(&self) -> bool {
        if self.m % 2 != 0 {
            return false;
        }
        let h = self.m / 2 * self.d;
        let top_left = self.matrix.slice(s![..h, ..h]);
        let top_right = self.matrix.slice(s![..h, h..]);
        let bottom_left = self.matrix.slice(s![h.., ..h]);
        let bottom_right = self.matrix.slice(s![h.., h..]);
        top_left
            .iter()
            .zip(top_right.iter())
            .zip(bottom_left.iter().zip(bottom_right.iter()))
            .all(|((&a, &b), (&c, &e))| b == -a && c == -a && e == a)
    }
}

const UNIT_TOL: f64 = 1e-9;

/// Block coefficients `(u1, u2, u3)` of
/// `u(theta1, theta2) = E[sigma'(theta1.x) sigma'(theta2.x) x x^T]
///   = u1 I + u2 (t1 t2^T + t2 t1^T) + u3 (t1 t1^T + t2 t2^T)`.
struct BlockKernels {
    d: usize,
    /// `E[s'(z1) s'(z2)]`
    k00: KernelSeries,
    /// `E[z1 s'(z1) z2 s'(z2)]`
    k11: KernelSeries,
    /// `E[z1^2 s'(z1) s'(z2)]`
    k20: KernelSeries,
}

enum BlockForm {
    General([f64; 3]),
    /// `|t| = 1`: `u = u1 I + c theta1 theta1^T`.
    Collinear { u1: f64, c: f64 },
}

impl BlockKernels {
    fn coefficients(&self, t: f64, buf: &mut Vec<f64>) -> Option<BlockForm> {
        let dd = self.d as f64;
        if (1.0 - t.abs()) < UNIT_TOL {
            let t = t.signum();
            let trace = dd * self.k00.eval(t, buf);
            let along = self.k20.eval(t, buf);
            let u1 = (trace - along) / (dd - 1.0);
            return Some(BlockForm::Collinear { u1, c: along - u1 });
        }
        let trace = dd * self.k00.eval(t, buf);
        let cross = self.k11.eval(t, buf);
        let along = self.k20.eval(t, buf);
        let a = [
            [dd, 2.0 * t, 2.0],
            [t, 1.0 + t * t, 2.0 * t],
            [1.0, 2.0 * t, 1.0 + t * t],
        ];
        solve3(a, [trace, cross, along], 1e-12).map(BlockForm::General)
    }
}

/// Analytic feature covariance from Gegenbauer coefficients of `sigma'`,
/// `z sigma'(z)` and `z^2 sigma'(z)`.
pub fn sigma_from_coeffs(init: &NetworkInit, act: &Activation, ctx: &HarmonicsContext) -> Result<SigmaMatrix> {
    sigma_from_coeffs_capped(init, act, ctx, DEFAULT_DENSE_CAP)
}

pub fn sigma_from_coeffs_capped(
    init: &NetworkInit,
    act: &Activation,
    ctx: &HarmonicsContext,
    cap: usize,
) -> Result<SigmaMatrix> {
    let (d, m) = (init.d(), init.m());
    if d != ctx.d {
        return Err(Error::InvalidArgument(format!("context dimension {} != network dimension {d}", ctx.d)));
    }
    let dim = d * m;
    if dim > cap {
        return Err(Error::DenseCap { dim, cap });
    }
    let a = *act;
    let s0 = gegenbauer_coeffs(|z| a.d1(z), ctx)?;
    let s1 = gegenbauer_coeffs(|z| z * a.d1(z), ctx)?;
    let s2 = gegenbauer_coeffs(|z| z * z * a.d1(z), ctx)?;
    let tail_mass = [&s0, &s1, &s2]
        .iter()
        .map(|s| s.tail_mass())
        .fold(0.0, f64::max);
    let kernels = BlockKernels {
        d,
        k00: KernelSeries::new(&s0, &s0)?,
        k11: KernelSeries::new(&s1, &s1)?,
        k20: KernelSeries::new(&s2, &s0)?,
    };

    let mut sigma = Array2::zeros((dim, dim));
    let mut buf = Vec::with_capacity(ctx.truncation + 1);
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let th1 = init.w0.column(i);
        for j in i..m {
            let th2 = init.w0.column(j);
            let t = th1.dot(&th2);
            let form = kernels
                .coefficients(t, &mut buf)
                .ok_or(Error::SingularBlock { row: i, col: j, t })?;
            let scale = init.a[i] * init.a[j] * inv_m;
            for p in 0..d {
                for q in 0..d {
                    let eye = if p == q { 1.0 } else { 0.0 };
                    let v = match form {
                        BlockForm::General([u1, u2, u3]) => {
                            u1 * eye
                                + u2 * (th1[p] * th2[q] + th2[p] * th1[q])
                                + u3 * (th1[p] * th1[q] + th2[p] * th2[q])
                        }
                        BlockForm::Collinear { u1, c } => u1 * eye + c * (th1[p] * th1[q]),
                    };
                    sigma[[i * d + p, j * d + q]] = scale * v;
                }
            }
        }
    }
    // Mirror the upper block triangle; diagonal blocks are symmetric already
    // up to rounding, so force exact symmetry from the upper triangle.
    for r in 0..dim {
        for c in 0..r {
            sigma[[r, c]] = sigma[[c, r]];
        }
    }
    Ok(SigmaMatrix {
        matrix: sigma,
        d,
        m,
        provenance: Provenance::Analytic { truncation: ctx.truncation, tail_mass },
    })
}

/// Monte-Carlo estimate `N^{-1} sum_i phi(x_i) phi(x_i)^T` over fresh sphere
/// samples, with per-entry standard errors.
pub fn sigma_monte_carlo(init: &NetworkInit, act: &Activation, n_samples: usize, seed: u64) -> SigmaMatrix {
    monte_carlo_covariance(init, act, n_samples, seed, true)
}

pub fn monte_carlo_covariance(
    init: &NetworkInit,
    act: &Activation,
    n_samples: usize,
    seed: u64,
    with_errors: bool,
) -> SigmaMatrix {
    let (d, m) = (init.d(), init.m());
    let dim = d * m;
    let mut rng = rng::stream(seed, streams::MONTE_CARLO);
    let mut sum = Array2::<f64>::zeros((dim, dim));
    let mut sum_sq = if with_errors { Some(Array2::<f64>::zeros((dim, dim))) } else { None };
    const CHUNK: usize = 2048;
    let mut done = 0;
    while done < n_samples {
        let b = CHUNK.min(n_samples - done);
        let x = sample_sphere_with(b, d, &mut rng);
        let phi = featurize_batch(x.view(), init, act);
        sum += &phi.t().dot(&phi);
        if let Some(acc) = sum_sq.as_mut() {
            let sq = phi.mapv(|v| v * v);
            *acc += &sq.t().dot(&sq);
        }
        done += b;
    }
    let n = n_samples.max(1) as f64;
    let mean = sum / n;
    let std_err = sum_sq.map(|sq| {
        let second = sq / n;
        let mut se = second - &mean.mapv(|v| v * v);
        se.mapv_inplace(|v| (v.max(0.0) / (n - 1.0).max(1.0)).sqrt());
        se
    });
    let mut matrix = mean;
    for r in 0..dim {
        for c in 0..r {
            let v = 0.5 * (matrix[[r, c]] + matrix[[c, r]]);
            matrix[[r, c]] = v;
            matrix[[c, r]] = v;
        }
    }
    SigmaMatrix {
        matrix,
        d,
        m,
        provenance: Provenance::MonteCarlo { samples: n_samples, seed, std_err },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sym_eigen_desc, sym_op_norm};
    use crate::model::init_symmetric;

    fn small() -> (NetworkInit, Activation, HarmonicsContext) {
        let init = init_symmetric(6, 8, 21).unwrap();
        (init, Activation::default(), HarmonicsContext::new(6, 24).unwrap())
    }

    #[test]
    fn analytic_sigma_structure() {
        let (init, act, ctx) = small();
        let sig = sigma_from_coeffs(&init, &act, &ctx).unwrap();
        assert_eq!(sig.asymmetry(), 0.0);
        assert!(sig.has_symmetric_block_layout());
        let eig = sym_eigen_desc(sig.matrix.view());
        let top = eig.values[0];
        assert!(eig.values.iter().all(|&v| v >= -1e-8 * top));
        let inv_m = 1.0 / 8.0;
        for i in 0..sig.dim() {
            assert!(sig.matrix[[i, i]] <= inv_m);
        }
    }

    #[test]
    fn diagonal_bound_for_generic_init() {
        // Not symmetric: independent columns, arbitrary signs.
        let mut init = init_symmetric(5, 6, 2).unwrap();
        let other = init_symmetric(5, 6, 99).unwrap();
        for r in 3..6 {
            init.w0.column_mut(r).assign(&other.w0.column(r));
        }
        init.a = ndarray::array![1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let sig = sigma_from_coeffs(&init, &Activation::default(), &HarmonicsContext::new(5, 24).unwrap()).unwrap();
        assert!(!sig.has_symmetric_block_layout());
        for i in 0..sig.dim() {
            assert!(sig.matrix[[i, i]] <= 1.0 / 6.0);
        }
    }

    #[test]
    fn dense_cap_enforced() {
        let init = init_symmetric(10, 8, 0).unwrap();
        let ctx = HarmonicsContext::new(10, 8).unwrap();
        let err = sigma_from_coeffs_capped(&init, &Activation::default(), &ctx, 40).unwrap_err();
        assert!(matches!(err, Error::DenseCap { dim: 80, cap: 40 }));
    }

    #[test]
    fn monte_carlo_basic_properties() {
        let (init, act, _) = small();
        let one = monte_carlo_covariance(&init, &act, 1, 3, false);
        let eig = sym_eigen_desc(one.matrix.view());
        assert!(eig.values[1].abs() < 1e-12 * eig.values[0].max(1e-300));
        let trace: f64 = (0..one.dim()).map(|i| one.matrix[[i, i]]).sum();
        assert!(trace <= 6.0);
        let many = monte_carlo_covariance(&init, &act, 5000, 3, false);
        let trace: f64 = (0..many.dim()).map(|i| many.matrix[[i, i]]).sum();
        assert!(trace <= 6.0);
        assert!(many.has_symmetric_block_layout());
    }

    #[test]
    fn monte_carlo_converges_to_analytic() {
        let (init, act, ctx) = small();
        let exact = sigma_from_coeffs(&init, &act, &ctx).unwrap();
        let mut dists = Vec::new();
        for n in [4_000usize, 16_000, 64_000] {
            // average over a few seeds to make the halving check stable
            let mut acc = 0.0;
            for seed in 0..4 {
                let mc = monte_carlo_covariance(&init, &act, n, 100 + seed, false);
                acc += sym_op_norm((&mc.matrix - &exact.matrix).view());
            }
            dists.push(acc / 4.0);
        }
        for w in dists.windows(2) {
            let ratio = w[1] / w[0];
            assert!(ratio < 0.75 && ratio > 0.3, "{dists:?}");
        }
    }
}
