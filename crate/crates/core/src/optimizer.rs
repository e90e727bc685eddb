//! Perturbed gradient descent, second-order stationarity checks, and the
//! training loop.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{cumulative_dim_usize, sigma_from_coeffs, HarmonicsContext};
use crate::linalg::{frobenius, inner};
use crate::model::{Activation, BatchCache, ModelKind, NetworkInit, WeightDelta, WeightNorms};
use crate::objective::{mean_loss, CovarianceSplit, Differentiable, LossSpec, Objective, Population, RegWeights};
use crate::rng::{self, streams, Rng};
use crate::spectral::{top_right_singular, FeatureMatrix, SpectralPartition};
use crate::tasks::{sample_sphere_with, Dataset};

/// Source of R1/R2 during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationMode {
    /// Fresh sphere samples each step, projected with the training partition.
    #[default]
    Fresh,
    /// Dense analytic covariance (small `md` only).
    Analytic,
    /// Not evaluated.
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Perturbation parameter; each entry of the noise has variance `noise_var / (m d)`.
    pub noise_var: f64,
    pub max_steps: usize,
    /// First-order tolerance; `None` means `m^{-1/2}`.
    pub nu: Option<f64>,
    /// Hessian tolerance; `None` means `m^{-3/4}`.
    pub gamma: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
    pub model: ModelKind,
    pub population: PopulationMode,
    pub n_fresh: usize,
    /// Check for a second-order stationary point at most this often (0 disables).
    pub sosp_every: usize,
    pub stop_at_sosp: bool,
    pub hessian_iters: usize,
    pub divergence: f64,
    /// Build the spectral partition even when R3 carries no weight, for logging.
    pub track_r3: bool,
    /// Stop once the training loss drops by less than this fraction between
    /// consecutive logged steps (0 disables).
    pub converge_rtol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            noise_var: 0.0,
            max_steps: 1000,
            nu: None,
            gamma: None,
            seed: 0,
            eval_every: 10,
            model: ModelKind::Taylor,
            population: PopulationMode::Fresh,
            n_fresh: 256,
            sosp_every: 0,
            stop_at_sosp: false,
            hessian_iters: 200,
            divergence: 1e6,
            track_r3: true,
            converge_rtol: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::Config("noise_var must be nonnegative".into()));
        }
        for (name, v) in [("nu", self.nu), ("gamma", self.gamma)] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return Err(Error::Config(format!("{name} must be nonnegative")));
                }
            }
        }
        if !(self.converge_rtol >= 0.0) {
            return Err(Error::Config("converge_rtol must be nonnegative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn nu_for(&self, m: usize) -> f64 {
        self.nu.unwrap_or((m as f64).powf(-0.5))
    }

    pub fn gamma_for(&self, m: usize) -> f64 {
        self.gamma.unwrap_or((m as f64).powf(-0.75))
    }
}

/// `W - lr (grad + Xi)` with `Xi_ij ~ N(0, noise_var / (m d))`.
pub fn pgd_step(w: ArrayView2<'_, f64>, grad: ArrayView2<'_, f64>, lr: f64, noise_var: f64, rng: &mut Rng) -> Result<WeightDelta> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: 0 });
    }
    let (d, m) = w.dim();
    let mut out = w.to_owned();
    out.scaled_add(-lr, &grad);
    if noise_var > 0.0 {
        let std = noise_std(noise_var, d, m);
        for v in out.iter_mut() {
            let xi: f64 = StandardNormal.sample(rng);
            *v -= lr * std * xi;
        }
    }
    Ok(out)
}

/// `|grad f(W)|_F <= nu`.
pub fn check_first_order(w: ArrayView2<'_, f64>, f: &dyn Differentiable, nu: f64) -> Result<bool> {
    Ok(frobenius(f.grad(w)?.view()) <= nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HessianEstimate {
    pub value: f64,
    /// `|H v - value v|` for the returned unit vector.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Central finite difference of the gradient along `v`.
fn hvp(f: &dyn Differentiable, w: ArrayView2<'_, f64>, v: &Array2<f64>, h: f64) -> Result<Array2<f64>> {
    let plus = f.grad((&w + &(v * h)).view())?;
    let minus = f.grad((&w - &(v * h)).view())?;
    Ok((plus - minus) / (2.0 * h))
}

fn normalize(v: &mut Array2<f64>) -> f64 {
    let n = frobenius(v.view());
    if n > 0.0 {
        *v /= n;
    }
    n
}

/// Power iteration on `shift I + sign H`, returning the Rayleigh quotient of `H`.
fn power(
    f: &dyn Differentiable,
    w: ArrayView2<'_, f64>,
    h: f64,
    shift: f64,
    sign: f64,
    tol: f64,
    iters: usize,
    rng: &mut Rng,
) -> Result<HessianEstimate> {
    let mut v = Array2::from_shape_simple_fn(w.dim(), || StandardNormal.sample(rng));
    normalize(&mut v);
    let mut est = HessianEstimate { value: 0.0, residual: f64::INFINITY, iterations: 0, converged: false };
    for it in 1..=iters {
        let hv = hvp(f, w, &v, h)?;
        let rq = inner(v.view(), hv.view());
        let residual = frobenius((&hv - &(&v * rq)).view());
        est = HessianEstimate { value: rq, residual, iterations: it, converged: residual <= tol };
        if est.converged {
            break;
        }
        let mut next = &v * shift + &(hv * sign);
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
    }
    Ok(est)
}

/// Estimate of `lambda_min(hess f(W))` from finite-difference Hessian-vector
/// products and shifted power iteration. `tol` bounds the eigen-residual.
pub fn min_hessian_eig(w: ArrayView2<'_, f64>, f: &dyn Differentiable, tol: f64, iters: usize) -> Result<HessianEstimate> {
    let h = 1e-4 * (1.0 + frobenius(w));
    let mut rng = rng::stream(0, streams::PROBE);
    let top = power(f, w, h, 0.0, 1.0, tol, iters, &mut rng)?;
    // |lambda| of the dominant eigenpair bounds the spectrum; shift so the
    // smallest eigenvalue of H becomes the dominant one of (L I - H).
    let bound = top.value.abs() + top.residual;
    if bound == 0.0 {
        return Ok(HessianEstimate { value: 0.0, residual: 0.0, iterations: top.iterations, converged: true });
    }
    let shift = 1.05 * bound;
    let low = power(f, w, h, shift, -1.0, tol, iters, &mut rng)?;
    if !low.converged {
        log::warn!("min_hessian_eig did not converge in {iters} iterations (residual {:.3e})", low.residual);
    }
    Ok(low)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub grad_norm: f64,
    pub frob: f64,
    pub w24: f64,
    pub winf: f64,
}

pub const TRAJECTORY_HEADER: &str = "step,train_loss,test_loss,r1,r2,r3,r4,grad_norm,frob,w24,winf";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxSteps,
    Sosp,
    Diverged,
    Converged,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::MaxSteps => "max-steps",
            StopReason::Sosp => "sosp",
            StopReason::Diverged => "diverged",
            StopReason::Converged => "converged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
    pub stop: StopReason,
    /// First step at which a (nu, gamma)-SOSP was detected.
    pub sosp_step: Option<usize>,
    pub final_w: WeightDelta,
}

impl TrajectoryRecord {
    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(TRAJECTORY_HEADER.split(','))?;
        for r in &self.rows {
            w.write_record(&[
                r.step.to_string(),
                fmt(r.train_loss),
                fmt(r.test_loss),
                fmt(r.r1),
                fmt(r.r2),
                fmt(r.r3),
                fmt(r.r4),
                fmt(r.grad_norm),
                fmt(r.frob),
                fmt(r.w24),
                fmt(r.winf),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation; NaN marks unavailable values.
pub fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Everything `train` derives from its inputs once before the loop.
pub struct TrainContext {
    pub train: BatchCache,
    pub test: BatchCache,
    pub partition: Option<SpectralPartition>,
    pub covariance: Option<CovarianceSplit>,
}

impl TrainContext {
    pub fn build(init: &NetworkInit, act: &Activation, data: &Dataset, weights: &RegWeights, cfg: &TrainConfig) -> Result<Self> {
        let train = BatchCache::new(data.x_train.clone(), init, act)?;
        let test = BatchCache::new(data.x_test.clone(), init, act)?;
        let rank = match weights.rank {
            Some(r) => r,
            None => cumulative_dim_usize(init.d(), data.k)?,
        };
        let needs_population = weights.l1 > 0.0 || weights.l2 > 0.0;
        let wants_partition = weights.l3 > 0.0
            || cfg.track_r3
            || (cfg.population == PopulationMode::Fresh && needs_population);
        let partition = if wants_partition {
            Some(top_right_singular(FeatureMatrix::from_cache(train.clone()), rank.min(data.n_train()))?)
        } else {
            None
        };
        let covariance = if cfg.population == PopulationMode::Analytic {
            let ctx = HarmonicsContext::for_task(init.d(), data.k)?;
            Some(CovarianceSplit::new(&sigma_from_coeffs(init, act, &ctx)?, rank)?)
        } else {
            None
        };
        Ok(Self { train, test, partition, covariance })
    }
}

/// PGD from `W = 0` until an SOSP is detected (when `stop_at_sosp`) or
/// `max_steps` is reached. Aborts on divergence, returning the trajectory so far.
pub fn train(
    init: &NetworkInit,
    act: &Activation,
    data: &Dataset,
    loss: LossSpec,
    weights: RegWeights,
    cfg: &TrainConfig,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let ctx = TrainContext::build(init, act, data, &weights, cfg)?;
    train_with(init, act, data, loss, weights, cfg, &ctx)
}

pub fn train_with(
    init: &NetworkInit,
    act: &Activation,
    data: &Dataset,
    loss: LossSpec,
    weights: RegWeights,
    cfg: &TrainConfig,
    ctx: &TrainContext,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let (d, m) = (init.d(), init.m());
    let population = match (cfg.population, &ctx.covariance, &ctx.partition) {
        (PopulationMode::Analytic, Some(c), _) => Population::Exact(c),
        (PopulationMode::Fresh, _, Some(p)) => Population::Sampled(p),
        _ => Population::None,
    };
    let sampled = matches!(population, Population::Sampled(_));
    let mut obj = Objective::new(&ctx.train, data.y_train.view(), loss, cfg.model, weights)?.with_population(population);
    if let Some(p) = &ctx.partition {
        obj = obj.with_partition(p);
    }
    let needs_fresh_each_step = sampled && (weights.l1 > 0.0 || weights.l2 > 0.0);

    let mut noise_rng = rng::stream(cfg.seed, streams::NOISE);
    let mut fresh_rng = rng::stream(cfg.seed, streams::FRESH);
    let nu = cfg.nu_for(m);
    let gamma = cfg.gamma_for(m);

    let mut w = Array2::<f64>::zeros((d, m));
    let mut rows: Vec<TrajectoryRow> = Vec::new();
    let mut sosp_step = None;
    let mut stop = StopReason::MaxSteps;
    let mut last_sosp_check: Option<usize> = None;

    for step in 0..=cfg.max_steps {
        let log_now = step % cfg.eval_every == 0 || step == cfg.max_steps;
        obj.fresh = if needs_fresh_each_step || (sampled && log_now) {
            Some(BatchCache::new(sample_sphere_with(cfg.n_fresh, d, &mut fresh_rng), init, act)?)
        } else {
            None
        };
        obj.report_all = log_now;
        let (b, grad) = obj.evaluate(w.view())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step });
        }
        let grad_norm = frobenius(grad.view());
        let diverged = !b.loss.is_finite() || b.loss > cfg.divergence;
        let make_row = |w: &Array2<f64>| TrajectoryRow {
            step,
            train_loss: b.loss,
            test_loss: mean_loss(&loss, data.y_test.view(), ctx.test.outputs(w.view(), cfg.model).view()),
            r1: b.r1.unwrap_or(f64::NAN),
            r2: b.r2.unwrap_or(f64::NAN),
            r3: b.r3.unwrap_or(f64::NAN),
            r4: b.r4,
            grad_norm,
            frob: w.frobenius(),
            w24: w.norm_2p(4.0),
            winf: w.norm_2inf(),
        };
        let mut converged = false;
        if log_now || diverged {
            if let Some(prev) = rows.last() {
                converged = cfg.converge_rtol > 0.0 && b.loss >= prev.train_loss * (1.0 - cfg.converge_rtol);
            }
            rows.push(make_row(&w));
        }
        if diverged {
            stop = StopReason::Diverged;
            log::warn!("training diverged at step {step} (loss {:.3e})", b.loss);
            break;
        }
        if converged {
            stop = StopReason::Converged;
            break;
        }
        if cfg.sosp_every > 0
            && grad_norm <= nu
            && last_sosp_check.map_or(true, |s| step >= s + cfg.sosp_every)
        {
            last_sosp_check = Some(step);
            let est = min_hessian_eig(w.view(), &obj, 1e-6, cfg.hessian_iters)?;
            if est.value >= -gamma {
                sosp_step.get_or_insert(step);
                if cfg.stop_at_sosp {
                    stop = StopReason::Sosp;
                    if !log_now {
                        rows.push(make_row(&w));
                    }
                    break;
                }
            }
        }
        if step == cfg.max_steps {
            break;
        }
        w = pgd_step(w.view(), grad.view(), cfg.lr, cfg.noise_var, &mut noise_rng)
            .map_err(|_| Error::NonFiniteGradient { step })?;
    }
    Ok(TrajectoryRecord { rows, stop, sosp_step, final_w: w })
}

/// Per-entry noise standard deviation used by [`pgd_step`].
pub fn noise_std(noise_var: f64, d: usize, m: usize) -> f64 {
    (noise_var / (m * d) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_symmetric;
    use crate::tasks::{build_dataset, make_fig1_target};

    /// `0.5 vec(W)^T A vec(W)` over a d x m weight.
    struct Quadratic {
        a: Array2<f64>,
        shape: (usize, usize),
    }

    impl Differentiable for Quadratic {
        fn value_grad(&self, w: ArrayView2<'_, f64>) -> Result<(f64, WeightDelta)> {
            let v = crate::linalg::vec_cols(w);
            let av = self.a.dot(&v);
            Ok((0.5 * v.dot(&av), crate::linalg::unvec_cols(&av, self.shape.0, self.shape.1)))
        }
    }

    #[test]
    fn step_without_noise() {
        let w = Array2::from_elem((3, 2), 0.7);
        let mut rng = rng::stream(0, 0);
        let same = pgd_step(w.view(), Array2::zeros((3, 2)).view(), 0.1, 0.0, &mut rng).unwrap();
        assert_eq!(same, w);
        let mut cur = w.clone();
        for _ in 0..5 {
            let prev = cur.frobenius();
            cur = pgd_step(cur.view(), cur.view(), 0.1, 0.0, &mut rng).unwrap();
            assert!((cur.frobenius() / prev - 0.9).abs() < 1e-12);
        }
        let mut bad = Array2::zeros((3, 2));
        bad[[0, 0]] = f64::NAN;
        assert!(pgd_step(w.view(), bad.view(), 0.1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn first_order_threshold_inclusive() {
        let q = Quadratic { a: Array2::eye(4), shape: (2, 2) };
        let mut w = Array2::zeros((2, 2));
        assert!(check_first_order(w.view(), &q, 0.0).unwrap());
        w[[0, 0]] = 1.0;
        assert!(!check_first_order(w.view(), &q, 0.5).unwrap());
        assert!(check_first_order(w.view(), &q, 1.0).unwrap());
    }

    #[test]
    fn hessian_simple_cases() {
        let q = Quadratic { a: Array2::eye(6), shape: (3, 2) };
        let est = min_hessian_eig(Array2::zeros((3, 2)).view(), &q, 1e-8, 500).unwrap();
        assert!((est.value - 1.0).abs() < 1e-4);
        let mut a = Array2::zeros((4, 4));
        a[[0, 0]] = 1.0;
        a[[2, 2]] = -1.0;
        let saddle = Quadratic { a, shape: (2, 2) };
        let est = min_hessian_eig(Array2::zeros((2, 2)).view(), &saddle, 1e-8, 2000).unwrap();
        assert!((est.value + 1.0).abs() < 1e-4, "{est:?}");
    }

    #[test]
    fn tiny_gd_is_monotone_and_deterministic() {
        let init = init_symmetric(3, 8, 0).unwrap();
        let act = Activation::default();
        let target = make_fig1_target(3, 0).unwrap();
        let data = build_dataset(&target, 5, 5, 1);
        let cfg = TrainConfig { lr: 0.05, max_steps: 200, eval_every: 1, ..TrainConfig::default() };
        let rec = train(&init, &act, &data, LossSpec::square(), RegWeights::default(), &cfg).unwrap();
        for pair in rec.rows.windows(2) {
            assert!(pair[1].train_loss <= pair[0].train_loss + 1e-15);
            assert!(pair[1].step > pair[0].step);
        }
        let again = train(&init, &act, &data, LossSpec::square(), RegWeights::default(), &cfg).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        rec.write_csv(&mut a).unwrap();
        again.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with(TRAJECTORY_HEADER));
    }

    #[test]
    fn noise_variance() {
        let mut rng = rng::stream(3, 0);
        let (d, m) = (10, 20);
        let sigma2 = 2.0;
        let mut acc = 0.0;
        let draws = 500;
        for _ in 0..draws {
            let w = Array2::zeros((d, m));
            let out = pgd_step(w.view(), w.view(), 1.0, sigma2, &mut rng).unwrap();
            acc += out.iter().map(|v| v * v).sum::<f64>();
        }
        let var = acc / (draws * d * m) as f64;
        assert!((var / (sigma2 / (d * m) as f64) - 1.0).abs() < 0.03);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { max_steps: 0, ..TrainConfig::default() }.validate().is_err());
        let cfg = TrainConfig::default();
        assert!((cfg.nu_for(100) - 0.1).abs() < 1e-15);
        assert!((cfg.gamma_for(16) - 0.125).abs() < 1e-15);
    }
}
