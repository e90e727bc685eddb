//! NTK featurization, the empirical feature matrix, and spectral partitions
//! of both `Phi` (through its Gram matrix) and the population covariance.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::harmonics::{cumulative_dim_usize, SigmaMatrix, DEFAULT_DENSE_CAP};
use crate::linalg::{sym_eigen_desc, unvec_cols, vec_cols};
use crate::model::{Activation, BatchCache, NetworkInit, WeightDelta};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

/// `phi(x) = vec{ a_r sigma'(w0_r^T x) x / sqrt m }_r`.
pub fn featurize(x: ArrayView1<'_, f64>, init: &NetworkInit, act: &Activation) -> Result<Array1<f64>> {
    let d = init.d();
    if x.len() != d {
        return Err(shape_err(format!("x of length {d}"), format!("{}", x.len())));
    }
    let m = init.m();
    let scale = 1.0 / (m as f64).sqrt();
    let mut out = Array1::zeros(m * d);
    for r in 0..m {
        let c = init.a[r] * act.d1(init.w0.column(r).dot(&x)) * scale;
        out.slice_mut(s![r * d..(r + 1) * d]).assign(&(&x * c));
    }
    Ok(out)
}

/// Rows `phi(x_i)^T` materialized densely, n x md.
pub fn featurize_batch(x: ArrayView2<'_, f64>, init: &NetworkInit, act: &Activation) -> Array2<f64> {
    let (n, d) = x.dim();
    let m = init.m();
    let scale = 1.0 / (m as f64).sqrt();
    let pre = x.dot(&init.w0);
    let mut phi = Array2::zeros((n, m * d));
    for i in 0..n {
        let xi = x.row(i);
        let mut row = phi.row_mut(i);
        for r in 0..m {
            let c = init.a[r] * act.d1(pre[[i, r]]) * scale;
            for p in 0..d {
                row[r * d + p] = c * xi[p];
            }
        }
    }
    phi
}

/// Implicit `Phi` over a fixed input batch.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub cache: BatchCache,
}

impl FeatureMatrix {
    pub fn new(x: Array2<f64>, init: &NetworkInit, act: &Activation) -> Result<Self> {
        Ok(Self { cache: BatchCache::new(x, init, act)? })
    }

    pub fn from_cache(cache: BatchCache) -> Self {
        Self { cache }
    }

    pub fn n(&self) -> usize {
        self.cache.n()
    }

    pub fn d(&self) -> usize {
        self.cache.d()
    }

    pub fn m(&self) -> usize {
        self.cache.m()
    }

    /// Number of columns, `m d`.
    pub fn dim(&self) -> usize {
        self.m() * self.d()
    }

    /// `Phi vec(W)`.
    pub fn apply(&self, w: ArrayView2<'_, f64>) -> Array1<f64> {
        self.cache.linear(w)
    }

    /// `Phi^T v` as a d x m matrix.
    pub fn apply_t(&self, v: ArrayView1<'_, f64>) -> WeightDelta {
        self.cache.linear_adjoint(v)
    }

    pub fn matvec(&self, v: &Array1<f64>) -> Array1<f64> {
        self.apply(unvec_cols(v, self.d(), self.m()).view())
    }

    pub fn rmatvec(&self, v: &Array1<f64>) -> Array1<f64> {
        vec_cols(self.apply_t(v.view()).view())
    }

    pub fn row(&self, i: usize) -> Array1<f64> {
        let (d, m) = (self.d(), self.m());
        let mut out = Array1::zeros(m * d);
        let xi = self.cache.x.row(i);
        for r in 0..m {
            out.slice_mut(s![r * d..(r + 1) * d]).assign(&(&xi * self.cache.lin[[i, r]]));
        }
        out
    }

    pub fn explicit(&self) -> Array2<f64> {
        let mut phi = Array2::zeros((self.n(), self.dim()));
        for i in 0..self.n() {
            phi.row_mut(i).assign(&self.row(i));
        }
        phi
    }

    /// `Phi Phi^T = (C C^T) o (X X^T)` with `C` the scaled derivative matrix.
    pub fn gram(&self) -> Array2<f64> {
        let c = &self.cache.lin;
        let x = &self.cache.x;
        c.dot(&c.t()) * &x.dot(&x.t())
    }
}

/// Projection onto a low subspace of weight space and its complement.
pub trait Projector {
    fn project_low(&self, w: ArrayView2<'_, f64>) -> WeightDelta;

    fn project_high(&self, w: ArrayView2<'_, f64>) -> WeightDelta {
        &w - &self.project_low(w)
    }
}

/// Top-r right-singular subspace of `Phi`, held implicitly through `U1, s1`.
#[derive(Debug, Clone)]
pub struct SpectralPartition {
    pub features: FeatureMatrix,
    pub rank: usize,
    pub requested_rank: usize,
    /// n x rank.
    pub u1: Array2<f64>,
    pub s1: Array1<f64>,
}

/// Builds the partition from the eigendecomposition of `Phi Phi^T`; the
/// rank is reduced if trailing singular values fall below [`RANK_TOL`].
pub fn top_right_singular(features: FeatureMatrix, r: usize) -> Result<SpectralPartition> {
    let n = features.n();
    if r > n.min(features.dim()) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} exceeds min(n, md) = {}",
            n.min(features.dim())
        )));
    }
    let eig = sym_eigen_desc(features.gram().view());
    let s_all: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let s_max = s_all.first().copied().unwrap_or(0.0);
    // Gram eigenvalues carry absolute error ~ n eps lambda_max, which caps the
    // resolvable singular-value ratio near sqrt(n eps).
    let floor = RANK_TOL.max((n as f64 * f64::EPSILON).sqrt()) * s_max;
    let rank = (0..r).take_while(|&i| s_all[i] > floor && s_all[i] > 0.0).count();
    if rank < r {
        log::warn!("requested rank {r} exceeds numerical rank; truncated to {rank}");
    }
    let u1 = eig.vectors.slice(s![.., ..rank]).to_owned();
    let s1 = Array1::from_iter(s_all[..rank].iter().copied());
    Ok(SpectralPartition { features, rank, requested_rank: r, u1, s1 })
}

impl SpectralPartition {
    pub fn truncated(&self) -> bool {
        self.rank < self.requested_rank
    }

    /// `U1 U1^T z` for an n-vector of outputs.
    pub fn low_outputs(&self, z: &Array1<f64>) -> Array1<f64> {
        self.u1.dot(&self.u1.t().dot(z))
    }

    /// `(I - U1 U1^T) Phi vec(W)`, the outputs of `f_L(.; Pi_high W)` on the batch.
    pub fn high_outputs(&self, w: ArrayView2<'_, f64>) -> Array1<f64> {
        let z = self.features.apply(w);
        &z - &self.low_outputs(&z)
    }

    /// Column j of `V1 = Phi^T U1 diag(1/s1)` as a d x m matrix.
    pub fn right_vector(&self, j: usize) -> WeightDelta {
        self.features.apply_t(self.u1.column(j)) / self.s1[j]
    }
}

impl Projector for SpectralPartition {
    fn project_low(&self, w: ArrayView2<'_, f64>) -> WeightDelta {
        let z = self.features.apply(w);
        let mut c = self.u1.t().dot(&z);
        c /= &self.s1.mapv(|s| s * s);
        self.features.apply_t(self.u1.dot(&c).view())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LargestGap {
    /// Number of eigenvalues above the gap.
    pub index: usize,
    pub ratio: f64,
}

/// Eigen-partition of `Sigma` at `n_k` and `n_2k`.
#[derive(Debug, Clone)]
pub struct SigmaEigPartition {
    pub d: usize,
    pub k: usize,
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
    pub n_k: usize,
    pub n_2k: usize,
    /// `lambda_{n_k} / lambda_{n_k + 1}`.
    pub gap_k: Option<f64>,
    /// `lambda_{n_2k} / lambda_{n_2k + 1}`.
    pub gap_2k: Option<f64>,
    pub largest_gap: Option<LargestGap>,
}

fn gap_at(values: &Array1<f64>, count: usize) -> Option<f64> {
    if count == 0 || count >= values.len() {
        return None;
    }
    Some(values[count - 1] / values[count])
}

/// Ratio floor for the largest-gap search: eigenvalues below this fraction
/// of the top one are treated as numerical zeros.
const GAP_FLOOR: f64 = 1e-12;

pub fn sigma_partition(sigma: &SigmaMatrix, k: usize) -> Result<SigmaEigPartition> {
    sigma_partition_capped(sigma, k, DEFAULT_DENSE_CAP)
}

pub fn sigma_partition_capped(sigma: &SigmaMatrix, k: usize, cap: usize) -> Result<SigmaEigPartition> {
    let dim = sigma.dim();
    if dim > cap {
        return Err(Error::DenseCap { dim, cap });
    }
    let eig = sym_eigen_desc(sigma.matrix.view());
    let n_k = cumulative_dim_usize(sigma.d, k)?.min(dim);
    let n_2k = cumulative_dim_usize(sigma.d, 2 * k)?.min(dim);
    let values = eig.values;
    let top = values.first().copied().unwrap_or(0.0);
    let mut largest_gap: Option<LargestGap> = None;
    for i in 0..values.len().saturating_sub(1) {
        if values[i + 1] <= GAP_FLOOR * top {
            break;
        }
        let ratio = values[i] / values[i + 1];
        if largest_gap.map_or(true, |g| ratio > g.ratio) {
            largest_gap = Some(LargestGap { index: i + 1, ratio });
        }
    }
    Ok(SigmaEigPartition {
        d: sigma.d,
        k,
        gap_k: gap_at(&values, n_k),
        gap_2k: gap_at(&values, n_2k),
        values,
        vectors: eig.vectors,
        n_k,
        n_2k,
        largest_gap,
    })
}

impl SigmaEigPartition {
    pub fn q1(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(s![.., ..self.n_k])
    }

    pub fn q2(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(s![.., self.n_k..self.n_2k])
    }

    pub fn q3(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(s![.., self.n_2k..])
    }

    pub fn block_of(&self, index: usize) -> &'static str {
        if index < self.n_k {
            "Q1"
        } else if index < self.n_2k {
            "Q2"
        } else {
            "Q3"
        }
    }

    pub fn summary(&self) -> GapSummary {
        GapSummary {
            d: self.d,
            k: self.k,
            dim: self.values.len(),
            n_k: self.n_k,
            n_2k: self.n_2k,
            lambda_max: self.values.first().copied().unwrap_or(0.0),
            lambda_min: self.values.last().copied().unwrap_or(0.0),
            gap_k: self.gap_k,
            gap_2k: self.gap_2k,
            largest_gap: self.largest_gap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GapSummary {
    pub d: usize,
    pub k: usize,
    pub dim: usize,
    pub n_k: usize,
    pub n_2k: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub gap_k: Option<f64>,
    pub gap_2k: Option<f64>,
    pub largest_gap: Option<LargestGap>,
}

pub const SPECTRUM_HEADER: [&str; 3] = ["index", "value", "block"];

/// Writes one `index,value,block` row per eigenvalue (1-based index) and
/// returns the summary.
pub fn gap_report(part: &SigmaEigPartition, out: impl Write) -> Result<GapSummary> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPECTRUM_HEADER)?;
    for (i, v) in part.values.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{v:e}"), part.block_of(i).to_string()])?;
    }
    w.flush()?;
    Ok(part.summary())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_linear, init_symmetric};
    use crate::tasks::sample_sphere;
    use ndarray::{array, Axis};
    use rand::Rng as _;

    fn setup(n: usize, d: usize, m: usize) -> (NetworkInit, Activation, Array2<f64>) {
        let init = init_symmetric(d, m, 4).unwrap();
        (init, Activation::default(), sample_sphere(n, d, 9))
    }

    fn random_w(d: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(seed, 0);
        Array2::from_shape_fn((d, m), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn featurize_properties() {
        let (init, act, x) = setup(20, 5, 6);
        let w = random_w(5, 6, 1);
        for xi in x.rows() {
            let phi = featurize(xi, &init, &act).unwrap();
            assert!(phi.dot(&phi) <= 5.0 + 1e-12);
            let lin = forward_linear(xi, &init, &act, w.view()).unwrap();
            assert!((phi.dot(&vec_cols(w.view())) - lin).abs() < 1e-12);
            let half = 3 * 5;
            for j in 0..half {
                assert_eq!(phi[j], -phi[half + j]);
            }
        }
    }

    #[test]
    fn implicit_matches_explicit() {
        let (init, act, x) = setup(12, 4, 6);
        let fm = FeatureMatrix::new(x.clone(), &init, &act).unwrap();
        let phi = fm.explicit();
        assert!((&phi - &featurize_batch(x.view(), &init, &act)).iter().all(|v| v.abs() < 1e-14));
        let v = vec_cols(random_w(4, 6, 2).view());
        let u = Array1::from_iter((0..12).map(|i| (i as f64 * 0.37).sin()));
        assert!((&fm.matvec(&v) - &phi.dot(&v)).iter().all(|e| e.abs() < 1e-10));
        assert!((&fm.rmatvec(&u) - &phi.t().dot(&u)).iter().all(|e| e.abs() < 1e-10));
        assert!((&fm.gram() - &phi.dot(&phi.t())).iter().all(|e| e.abs() < 1e-10));
    }

    #[test]
    fn partition_projector_identities() {
        let (init, act, x) = setup(15, 4, 8);
        let fm = FeatureMatrix::new(x, &init, &act).unwrap();
        let part = top_right_singular(fm, 5).unwrap();
        assert_eq!(part.rank, 5);
        let gram = part.u1.t().dot(&part.u1);
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - e).abs() < 1e-10);
            }
        }
        let w = random_w(4, 8, 3);
        let low = part.project_low(w.view());
        let high = part.project_high(w.view());
        assert!((&(&low + &high) - &w).iter().all(|e| e.abs() < 1e-10));
        let twice = part.project_low(low.view());
        assert!((&twice - &low).iter().all(|e| e.abs() < 1e-8));
        let v = part.right_vector(0);
        assert!(part.project_high(v.view()).iter().map(|e| e * e).sum::<f64>().sqrt() < 1e-8);
        assert!(part.high_outputs(v.view()).iter().all(|e| e.abs() < 1e-8));
    }

    #[test]
    fn rank_truncation_reported() {
        // Duplicated rows make the Gram matrix rank-deficient.
        let (init, act, x) = setup(3, 4, 4);
        let x = ndarray::concatenate![Axis(0), x, x];
        let fm = FeatureMatrix::new(x, &init, &act).unwrap();
        let part = top_right_singular(fm, 5).unwrap();
        assert_eq!(part.rank, 3);
        assert!(part.truncated());
        let fm = FeatureMatrix::new(sample_sphere(3, 4, 1), &init, &act).unwrap();
        assert!(top_right_singular(fm, 4).is_err());
    }

    #[test]
    fn spectrum_csv_schema() {
        let sigma = SigmaMatrix {
            matrix: Array2::from_diag(&array![5.0, 4.0, 4.0, 4.0, 1.0, 1.0, 0.5, 0.25, 0.25]),
            d: 3,
            m: 3,
            provenance: crate::harmonics::Provenance::Analytic { truncation: 0, tail_mass: 0.0 },
        };
        let part = sigma_partition(&sigma, 1).unwrap();
        assert_eq!((part.n_k, part.n_2k), (4, 9));
        assert_eq!(part.gap_k, Some(4.0));
        assert_eq!(part.gap_2k, None);
        assert_eq!(part.largest_gap, Some(LargestGap { index: 4, ratio: 4.0 }));
        let mut buf = Vec::new();
        let summary = gap_report(&part, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,value,block");
        assert_eq!(lines.len(), 10);
        assert!(lines[4].ends_with("Q1") && lines[5].ends_with("Q2"));
        assert_eq!(summary.dim, 9);
        assert_eq!(part.q1().ncols() + part.q2().ncols() + part.q3().ncols(), 9);
    }

    #[test]
    fn dense_cap_rejected() {
        let sigma = SigmaMatrix {
            matrix: Array2::eye(12),
            d: 3,
            m: 4,
            provenance: crate::harmonics::Provenance::Analytic { truncation: 0, tail_mass: 0.0 },
        };
        assert!(matches!(sigma_partition_capped(&sigma, 1, 10), Err(Error::DenseCap { .. })));
    }
}
