//! Losses, the four regularizers, and the regularized objective
//! `L(W) + l1 R1 + l2 R2 + l3 R3 + l4 R4` with analytic gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::harmonics::SigmaMatrix;
use crate::linalg::{sym_eigen_desc, unvec_cols, vec_cols};
use crate::model::{Activation, BatchCache, ModelKind, NetworkInit, WeightDelta};
use crate::rng::Rng;
use crate::spectral::{Projector, SpectralPartition};
use crate::tasks::sample_sphere_with;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `(y - z)^2 / 2`.
    #[default]
    Square,
    /// `log(1 + e^{z-y}) + log(1 + e^{y-z}) - 2 ln 2 = 2 log cosh((z - y) / 2)`.
    BoundedLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LossSpec {
    pub kind: LossKind,
}

/// Residual range on which the bounded-logistic loss stays at most 1.
pub const BOUNDED_LOGISTIC_RANGE: f64 = 2.17;

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl LossSpec {
    pub fn square() -> Self {
        Self { kind: LossKind::Square }
    }

    pub fn bounded_logistic() -> Self {
        Self { kind: LossKind::BoundedLogistic }
    }

    pub fn value(&self, y: f64, z: f64) -> f64 {
        match self.kind {
            LossKind::Square => 0.5 * (y - z) * (y - z),
            LossKind::BoundedLogistic => 2.0 * log_cosh(0.5 * (z - y)),
        }
    }

    /// `d l / d z`.
    pub fn d1(&self, y: f64, z: f64) -> f64 {
        match self.kind {
            LossKind::Square => z - y,
            LossKind::BoundedLogistic => (0.5 * (z - y)).tanh(),
        }
    }

    pub fn d2(&self, y: f64, z: f64) -> f64 {
        match self.kind {
            LossKind::Square => 1.0,
            LossKind::BoundedLogistic => {
                let t = (0.5 * (z - y)).tanh();
                0.5 * (1.0 - t * t)
            }
        }
    }

    /// Which of the bounded-loss assumptions hold globally.
    pub fn assumptions(&self) -> LossAssumptions {
        match self.kind {
            LossKind::Square => LossAssumptions { convex: true, bounded: false, lipschitz: false, smooth: true },
            LossKind::BoundedLogistic => LossAssumptions { convex: true, bounded: false, lipschitz: true, smooth: true },
        }
    }
}

/// `bounded`: `l <= 1` everywhere; holds for neither loss (a convex function
/// bounded on the whole line is constant), only on residual ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LossAssumptions {
    pub convex: bool,
    pub bounded: bool,
    pub lipschitz: bool,
    pub smooth: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RegWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    /// Partition rank; `None` means `n_k` for the task's `k`.
    pub rank: Option<usize>,
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("l3", self.l3), ("l4", self.l4)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("regularization weight {name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn only_r3(l3: f64) -> Self {
        Self { l3, ..Self::default() }
    }
}

/// `R4(W) = (sum_r |w_r|^4)^2`.
pub fn r4(w: ArrayView2<'_, f64>) -> f64 {
    let s: f64 = w.columns().into_iter().map(|c| c.dot(&c).powi(2)).sum();
    s * s
}

pub fn r4_grad(w: ArrayView2<'_, f64>) -> WeightDelta {
    let s: f64 = w.columns().into_iter().map(|c| c.dot(&c).powi(2)).sum();
    let mut g = w.to_owned();
    for mut col in g.columns_mut() {
        let sq = col.dot(&col);
        col *= 8.0 * s * sq;
    }
    g
}

/// Exact split `Sigma = Sigma_{<=r} + Sigma_{>r}` from a dense eigendecomposition.
#[derive(Debug, Clone)]
pub struct CovarianceSplit {
    pub sigma: Array2<f64>,
    /// md x r top eigenvectors.
    pub q: Array2<f64>,
    pub values: Array1<f64>,
    pub d: usize,
    pub m: usize,
}

impl CovarianceSplit {
    pub fn new(sigma: &SigmaMatrix, r: usize) -> Result<Self> {
        let dim = sigma.dim();
        if r > dim {
            return Err(Error::InvalidArgument(format!("rank {r} exceeds covariance dimension {dim}")));
        }
        let eig = sym_eigen_desc(sigma.matrix.view());
        Ok(Self {
            sigma: sigma.matrix.clone(),
            q: eig.vectors.slice(s![.., ..r]).to_owned(),
            values: eig.values.slice(s![..r]).to_owned(),
            d: sigma.d,
            m: sigma.m,
        })
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    fn check(&self, w: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if w.dim() != (self.d, self.m) {
            return Err(shape_err(format!("W of shape {:?}", (self.d, self.m)), format!("{:?}", w.dim())));
        }
        Ok(vec_cols(w))
    }

    /// `vec(W)^T Sigma vec(W)`.
    pub fn full(&self, w: ArrayView2<'_, f64>) -> Result<f64> {
        let v = self.check(w)?;
        Ok(v.dot(&self.sigma.dot(&v)))
    }

    /// `Sigma_{<=r} vec(W)` and `Sigma_{>r} vec(W)`.
    fn split_apply(&self, v: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let coef = self.q.t().dot(v) * &self.values;
        let low = self.q.dot(&coef);
        let high = self.sigma.dot(v) - &low;
        (low, high)
    }

    pub fn r1(&self, w: ArrayView2<'_, f64>) -> Result<f64> {
        let v = self.check(w)?;
        let (_, high) = self.split_apply(&v);
        Ok(v.dot(&high))
    }

    pub fn r2(&self, w: ArrayView2<'_, f64>) -> Result<f64> {
        let v = self.check(w)?;
        let c = self.q.t().dot(&v);
        Ok(c.iter().zip(self.values.iter()).map(|(c, l)| l * c * c).sum())
    }

    /// Values and gradients `(R1, grad R1, R2, grad R2)`.
    pub fn r1_r2_grad(&self, w: ArrayView2<'_, f64>) -> Result<(f64, WeightDelta, f64, WeightDelta)> {
        let v = self.check(w)?;
        let (low, high) = self.split_apply(&v);
        Ok((
            v.dot(&high),
            unvec_cols(&(high * 2.0), self.d, self.m),
            v.dot(&low),
            unvec_cols(&(low * 2.0), self.d, self.m),
        ))
    }
}

impl Projector for CovarianceSplit {
    fn project_low(&self, w: ArrayView2<'_, f64>) -> WeightDelta {
        let v = vec_cols(w);
        unvec_cols(&self.q.dot(&self.q.t().dot(&v)), self.d, self.m)
    }
}

/// Sample estimate `E_batch[f_L(x; P W)^2]` and its gradient for a symmetric
/// projector `P` (either the low or the high side).
pub fn projected_energy(batch: &BatchCache, proj: &dyn Projector, w: ArrayView2<'_, f64>, high: bool) -> (f64, WeightDelta) {
    let pw = if high { proj.project_high(w) } else { proj.project_low(w) };
    let z = batch.linear(pw.view());
    let n = batch.n() as f64;
    let value = z.dot(&z) / n;
    let back = batch.linear_adjoint((z * (2.0 / n)).view());
    let grad = if high { proj.project_high(back.view()) } else { proj.project_low(back.view()) };
    (value, grad)
}

/// Fresh-sample unbiased estimate of `R1 = E[f_L(x; P_high W)^2]`.
pub fn r1_unbiased(
    w: ArrayView2<'_, f64>,
    init: &NetworkInit,
    act: &Activation,
    proj: &dyn Projector,
    n_fresh: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_fresh == 0 {
        return Err(Error::InvalidArgument("n_fresh must be at least 1".into()));
    }
    let batch = BatchCache::new(sample_sphere_with(n_fresh, init.d(), rng), init, act)?;
    Ok(projected_energy(&batch, proj, w, true).0)
}

/// `R3(W) = E_n[f_L(x; Pi_high W)^2]` on the partition's own batch.
pub fn r3(w: ArrayView2<'_, f64>, part: &SpectralPartition) -> f64 {
    let h = part.high_outputs(w);
    h.dot(&h) / part.features.n() as f64
}

pub fn r3_grad(w: ArrayView2<'_, f64>, part: &SpectralPartition) -> (f64, WeightDelta) {
    let h = part.high_outputs(w);
    let n = part.features.n() as f64;
    let value = h.dot(&h) / n;
    // Phi^T (I - U U^T) h, and (I - U U^T) h = h since h is already projected.
    (value, part.features.apply_t((h * (2.0 / n)).view()))
}

/// How the population regularizers R1 and R2 are evaluated.
#[derive(Clone, Copy)]
pub enum Population<'a> {
    /// Exact quadratic forms from a dense covariance.
    Exact(&'a CovarianceSplit),
    /// Estimates on a caller-supplied fresh batch, with the given projector.
    Sampled(&'a dyn Projector),
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Breakdown {
    pub loss: f64,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub r3: Option<f64>,
    pub r4: f64,
    pub total: f64,
}

/// Anything with a value and a gradient in `W`.
pub trait Differentiable {
    fn value_grad(&self, w: ArrayView2<'_, f64>) -> Result<(f64, WeightDelta)>;

    fn grad(&self, w: ArrayView2<'_, f64>) -> Result<WeightDelta> {
        Ok(self.value_grad(w)?.1)
    }
}

/// `L_lambda` over a training batch.
pub struct Objective<'a> {
    pub batch: &'a BatchCache,
    pub y: ArrayView1<'a, f64>,
    pub loss: LossSpec,
    pub model: ModelKind,
    pub weights: RegWeights,
    pub partition: Option<&'a SpectralPartition>,
    pub population: Population<'a>,
    /// Batch for sampled R1/R2; replaced by the optimizer each step.
    pub fresh: Option<BatchCache>,
    /// Evaluate sampled population terms even when their weight is zero.
    pub report_all: bool,
}

impl<'a> Objective<'a> {
    pub fn new(batch: &'a BatchCache, y: ArrayView1<'a, f64>, loss: LossSpec, model: ModelKind, weights: RegWeights) -> Result<Self> {
        weights.validate()?;
        if y.len() != batch.n() {
            return Err(shape_err(format!("{} labels", batch.n()), format!("{}", y.len())));
        }
        Ok(Self { batch, y, loss, model, weights, partition: None, population: Population::None, fresh: None, report_all: true })
    }

    pub fn with_partition(mut self, part: &'a SpectralPartition) -> Self {
        self.partition = Some(part);
        self
    }

    pub fn with_population(mut self, population: Population<'a>) -> Self {
        self.population = population;
        self
    }

    /// Mean loss of the selected model on the training batch.
    pub fn empirical_loss(&self, w: ArrayView2<'_, f64>) -> f64 {
        let z = self.batch.outputs(w, self.model);
        mean_loss(&self.loss, self.y, z.view())
    }

    /// Value, gradient, and per-term breakdown. Terms with zero weight are
    /// still reported when available but contribute nothing to the gradient.
    pub fn evaluate(&self, w: ArrayView2<'_, f64>) -> Result<(Breakdown, WeightDelta)> {
        if w.dim() != (self.batch.d(), self.batch.m()) {
            return Err(shape_err(format!("W of shape {:?}", (self.batch.d(), self.batch.m())), format!("{:?}", w.dim())));
        }
        let n = self.batch.n() as f64;
        let p = self.batch.projections(w);
        let shared = self.partition.filter(|part| same_batch(&part.features.cache, self.batch));
        let lin = match (self.model, shared) {
            (ModelKind::Full, None) => None,
            _ => Some(self.batch.linear_from(&p)),
        };
        let (z, coef) = match (self.model, &lin) {
            (ModelKind::Full, _) => self.batch.full_with_coef(&p),
            (ModelKind::Taylor, Some(lin)) => (lin + &self.batch.quadratic_from(&p), &self.batch.lin + &(&self.batch.quad * &p)),
            (ModelKind::Taylor, None) => unreachable!("Taylor outputs always carry the linear term"),
        };
        let loss = mean_loss(&self.loss, self.y, z.view());
        let g: Array1<f64> = z
            .iter()
            .zip(self.y.iter())
            .map(|(&zi, &yi)| self.loss.d1(yi, zi) / n)
            .collect();
        let wt = self.weights;
        let mut total = loss;

        // R3 on the training batch itself shares `X W` and the final `X^T` product.
        let mut r3v = None;
        let mut grad = match (shared, &lin) {
            (Some(part), Some(lin)) => {
                let h = lin - &part.low_outputs(lin);
                let v = h.dot(&h) / part.features.n() as f64;
                r3v = Some(v);
                total += wt.l3 * v;
                let hw = h * (2.0 * wt.l3 / part.features.n() as f64);
                self.batch.adjoint_rows(coef, g.view(), Some(hw.view()))
            }
            _ => self.batch.adjoint_rows(coef, g.view(), None),
        };

        let (mut r1v, mut r2v) = (None, None);
        match self.population {
            Population::Exact(cov) => {
                let (a, ga, b, gb) = cov.r1_r2_grad(w)?;
                r1v = Some(a);
                r2v = Some(b);
                total += wt.l1 * a + wt.l2 * b;
                if wt.l1 > 0.0 {
                    grad.scaled_add(wt.l1, &ga);
                }
                if wt.l2 > 0.0 {
                    grad.scaled_add(wt.l2, &gb);
                }
            }
            Population::Sampled(proj) => {
                if let Some(fresh) = &self.fresh {
                    if wt.l1 > 0.0 || self.report_all {
                        let (a, ga) = projected_energy(fresh, proj, w, true);
                        r1v = Some(a);
                        total += wt.l1 * a;
                        if wt.l1 > 0.0 {
                            grad.scaled_add(wt.l1, &ga);
                        }
                    }
                    if wt.l2 > 0.0 || self.report_all {
                        let (b, gb) = projected_energy(fresh, proj, w, false);
                        r2v = Some(b);
                        total += wt.l2 * b;
                        if wt.l2 > 0.0 {
                            grad.scaled_add(wt.l2, &gb);
                        }
                    }
                } else if wt.l1 > 0.0 || wt.l2 > 0.0 {
                    return Err(Error::InvalidArgument("sampled R1/R2 requested without a fresh batch".into()));
                }
            }
            Population::None => {
                if wt.l1 > 0.0 || wt.l2 > 0.0 {
                    return Err(Error::InvalidArgument("R1/R2 weights set without a covariance source".into()));
                }
            }
        }

        let r3v = match self.partition {
            Some(_) if shared.is_some() => r3v,
            Some(part) => {
                let (v, g3) = r3_grad(w, part);
                total += wt.l3 * v;
                if wt.l3 > 0.0 {
                    grad.scaled_add(wt.l3, &g3);
                }
                Some(v)
            }
            None => {
                if wt.l3 > 0.0 {
                    return Err(Error::InvalidArgument("R3 weight set without a spectral partition".into()));
                }
                None
            }
        };

        let r4v = r4(w);
        total += wt.l4 * r4v;
        if wt.l4 > 0.0 {
            grad.scaled_add(wt.l4, &r4_grad(w));
        }
        Ok((Breakdown { loss, r1: r1v, r2: r2v, r3: r3v, r4: r4v, total }, grad))
    }
}

impl Differentiable for Objective<'_> {
    fn value_grad(&self, w: ArrayView2<'_, f64>) -> Result<(f64, WeightDelta)> {
        let (b, g) = self.evaluate(w)?;
        Ok((b.total, g))
    }
}

fn same_batch(a: &BatchCache, b: &BatchCache) -> bool {
    std::ptr::eq(a, b) || (a.x.dim() == b.x.dim() && a.lin.dim() == b.lin.dim() && a.x == b.x && a.lin == b.lin)
}

pub fn mean_loss(loss: &LossSpec, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> f64 {
    let n = y.len().max(1) as f64;
    y.iter().zip(z.iter()).map(|(&a, &b)| loss.value(a, b)).sum::<f64>() / n
}

/// `L_lambda(W)`.
pub fn regularized_loss(obj: &Objective<'_>, w: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(obj.evaluate(w)?.0.total)
}

/// `grad L_lambda(W)`.
pub fn regularized_grad(obj: &Objective<'_>, w: ArrayView2<'_, f64>) -> Result<WeightDelta> {
    Ok(obj.evaluate(w)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::inner;
    use crate::model::init_symmetric;
    use crate::tasks::sample_sphere;
    use rand::Rng as _;

    fn random_w(d: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(seed, 0);
        Array2::from_shape_fn((d, m), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn loss_basics() {
        for loss in [LossSpec::square(), LossSpec::bounded_logistic()] {
            for i in -20..=20 {
                let y = i as f64 * 0.1;
                assert_eq!(loss.value(y, y), 0.0);
                for j in -20..=20 {
                    let z = j as f64 * 0.1;
                    assert!(loss.d2(y, z) >= 0.0);
                    let h = 1e-5;
                    let fd = (loss.value(y, z + h) - loss.value(y, z - h)) / (2.0 * h);
                    assert!((fd - loss.d1(y, z)).abs() < 1e-7);
                }
            }
        }
        let bl = LossSpec::bounded_logistic();
        for i in -200..=200 {
            let r = i as f64 * BOUNDED_LOGISTIC_RANGE / 200.0;
            assert!(bl.value(0.0, r) <= 1.0);
            assert!(bl.d1(0.0, r).abs() <= 1.0 && bl.d2(0.0, r).abs() <= 1.0);
        }
        let direct = (1.0 + 1.5f64.exp()).ln() + (1.0 + (-1.5f64).exp()).ln() - 2.0 * 2f64.ln();
        assert!((bl.value(0.5, 2.0) - direct).abs() < 1e-14);
        assert!(bl.value(0.0, 100.0).is_finite());
    }

    #[test]
    fn r4_values() {
        let mut w = Array2::zeros((3, 4));
        assert_eq!(r4(w.view()), 0.0);
        w[[0, 2]] = 1.5;
        w[[1, 2]] = -0.5;
        assert!((r4(w.view()) - 2.5f64.powi(4)).abs() < 1e-12);
        let w = random_w(3, 4, 1);
        let lhs = inner(r4_grad(w.view()).view(), w.view());
        assert!((lhs / (8.0 * r4(w.view())) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn projected_energy_matches_definition() {
        let init = init_symmetric(4, 6, 0).unwrap();
        let act = Activation::default();
        let x = sample_sphere(30, 4, 1);
        let fm = crate::spectral::FeatureMatrix::new(x.clone(), &init, &act).unwrap();
        let part = crate::spectral::top_right_singular(fm, 5).unwrap();
        let batch = BatchCache::new(sample_sphere(25, 4, 2), &init, &act).unwrap();
        let w = random_w(4, 6, 3);
        let (v, g) = projected_energy(&batch, &part, w.view(), true);
        let hw = part.project_high(w.view());
        let z = batch.linear(hw.view());
        assert!((v - z.dot(&z) / 25.0).abs() < 1e-12);
        assert!((inner(g.view(), w.view()) / (2.0 * v) - 1.0).abs() < 1e-10);
        assert!((r3(w.view(), &part) - {
            let z = part.features.apply(hw.view());
            z.dot(&z) / 30.0
        })
        .abs() < 1e-10);
    }

    #[test]
    fn zero_weights_recover_empirical_loss() {
        let init = init_symmetric(3, 4, 0).unwrap();
        let act = Activation::default();
        let batch = BatchCache::new(sample_sphere(7, 3, 1), &init, &act).unwrap();
        let y = Array1::from_iter((0..7).map(|i| i as f64 * 0.1));
        let obj = Objective::new(&batch, y.view(), LossSpec::square(), ModelKind::Taylor, RegWeights::default()).unwrap();
        let w = random_w(3, 4, 2);
        let (b, _) = obj.evaluate(w.view()).unwrap();
        assert_eq!(b.total, b.loss);
        assert_eq!(b.total, obj.empirical_loss(w.view()));
        let bad = RegWeights { l1: 1.0, ..RegWeights::default() };
        let obj = Objective::new(&batch, y.view(), LossSpec::square(), ModelKind::Taylor, bad).unwrap();
        assert!(obj.evaluate(w.view()).is_err());
        assert!(RegWeights { l2: -1.0, ..RegWeights::default() }.validate().is_err());
    }
}
