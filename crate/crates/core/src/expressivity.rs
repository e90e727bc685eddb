//! Constructive expressivity: a quadratic-term solution for the sparse ridge
//! part, a linear-term solution for the low-degree part, and their
//! sign-randomized combination.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::harmonics::{dim_harmonics_f64, gegenbauer_all, gegenbauer_coeffs_unchecked, HarmonicsContext};
use crate::model::{Activation, BatchCache, NetworkInit, WeightDelta, WeightNorms};
use crate::objective::{projected_energy, r3, r4, CovarianceSplit, LossSpec};
use crate::rng::{self, streams};
use crate::spectral::{Projector, SpectralPartition};
use crate::tasks::{RidgeKind, TargetSpec};

/// Smallest admissible `|lambda_k(sigma'')|`.
pub const VANISHING_TOL: f64 = 1e-10;

/// `a(w0) = sum_{k<=p} c_k Q_k(d beta^T w0)` with
/// `c_k = B(d,k) lambda_k(alpha t^p) / lambda_k(sigma'')`, chosen so that
/// `E_{w0}[sigma''(w0^T x) a(w0)] = alpha (beta^T x)^p`.
#[derive(Debug, Clone)]
pub struct RfCoefficient {
    pub d: usize,
    pub beta: Array1<f64>,
    pub coeffs: Vec<f64>,
}

pub fn rf_coefficient_function(
    alpha: f64,
    beta: ArrayView1<'_, f64>,
    p: usize,
    act: &Activation,
    ctx: &HarmonicsContext,
) -> Result<RfCoefficient> {
    let d = ctx.d;
    if beta.len() != d {
        return Err(shape_err(format!("beta of length {d}"), format!("{}", beta.len())));
    }
    if ctx.truncation < p {
        return Err(Error::InvalidArgument(format!("truncation {} below degree {p}", ctx.truncation)));
    }
    let a = *act;
    let s2 = gegenbauer_coeffs_unchecked(|z| a.d2(z), ctx);
    let target = gegenbauer_coeffs_unchecked(|t| alpha * t.powi(p as i32), ctx);
    let mut coeffs = Vec::with_capacity(p + 1);
    for k in 0..=p {
        let denom = s2.coeffs[k];
        if denom.abs() < VANISHING_TOL {
            return Err(Error::VanishingCoefficient { degree: k, value: denom });
        }
        coeffs.push(dim_harmonics_f64(d, k) * target.coeffs[k] / denom);
    }
    Ok(RfCoefficient { d, beta: beta.to_owned(), coeffs })
}

impl RfCoefficient {
    /// `a` as a function of `s = d beta^T w0 in [-d, d]`.
    pub fn eval_s(&self, s: f64, buf: &mut Vec<f64>) -> f64 {
        gegenbauer_all(self.d, self.coeffs.len() - 1, s, buf);
        self.coeffs.iter().zip(buf.iter()).map(|(c, q)| c * q).sum()
    }

    pub fn eval(&self, w0: ArrayView1<'_, f64>) -> f64 {
        let mut buf = Vec::with_capacity(self.coeffs.len());
        self.eval_s(self.d as f64 * self.beta.dot(&w0), &mut buf)
    }

    /// `E_{w0}[a(w0)^2]` by quadrature in `t = sqrt(d) beta^T w0`.
    pub fn l2_norm_sq(&self, ctx: &HarmonicsContext) -> f64 {
        let sd = (self.d as f64).sqrt();
        let buf = std::cell::RefCell::new(Vec::new());
        ctx.integrate(|t| {
            let v = self.eval_s(sd * t, &mut buf.borrow_mut());
            v * v
        })
    }
}

/// Quadratic-term construction: per ridge direction, a block of
/// `M = floor(m / (2R))` neurons with
/// `(w_r, w_{r+m/2}) = sqrt(2/M) m^{1/4} (sqrt(a+) beta, sqrt(a-) beta)`.
pub fn construct_wq(target: &TargetSpec, init: &NetworkInit, act: &Activation, ctx: &HarmonicsContext) -> Result<WeightDelta> {
    if target.ridge != RidgeKind::Power {
        return Err(Error::InvalidArgument("quadratic construction needs power ridges".into()));
    }
    if target.k == 0 {
        return Err(Error::InvalidArgument("ridge degree k + 1 must be at least 2".into()));
    }
    let (d, m) = (init.d(), init.m());
    if d != target.d {
        return Err(shape_err(format!("target of dimension {d}"), format!("{}", target.d)));
    }
    let r_terms = target.rank();
    let block = if r_terms == 0 { 0 } else { m / (2 * r_terms) };
    if block == 0 {
        return Err(Error::InvalidArgument(format!("width {m} too small for {r_terms} ridge terms")));
    }
    let p = target.k - 1;
    let half = m / 2;
    let scale = (2.0 / block as f64).sqrt() * (m as f64).powf(0.25);
    let mut w = Array2::zeros((d, m));
    for (i, term) in target.sparse.iter().enumerate() {
        let rf = rf_coefficient_function(term.alpha, term.beta.view(), p, act, ctx)?;
        for r in i * block..(i + 1) * block {
            let a = rf.eval(init.w0.column(r));
            w.column_mut(r).assign(&(&term.beta * (scale * a.max(0.0).sqrt())));
            w.column_mut(r + half).assign(&(&term.beta * (scale * (-a).max(0.0).sqrt())));
        }
    }
    Ok(w)
}

/// Minimum-norm fit of `y_low` by `f_L` within the top right-singular
/// subspace: `vec(W_L) = Phi^T U1 diag(s1^-2) U1^T y_low`.
pub fn construct_wl(part: &SpectralPartition, y_low: ArrayView1<'_, f64>) -> Result<WeightDelta> {
    if y_low.len() != part.features.n() {
        return Err(shape_err(format!("{} targets", part.features.n()), format!("{}", y_low.len())));
    }
    let mut c = part.u1.t().dot(&y_low);
    c /= &part.s1.mapv(|s| s * s);
    Ok(part.features.apply_t(part.u1.dot(&c).view()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SignReport {
    pub trials: usize,
    /// Mean over sign draws of `E_n[f_L(x; W_Q S)^2]`.
    pub mean_linear_energy: f64,
    /// `|W_Q|_F^2 / m`.
    pub reference: f64,
    pub ratio: f64,
    /// `|W_L + W_Q S|_{2,4} <= |W_L|_{2,4} + |W_Q|_{2,4}` held for every draw.
    pub triangle_ok: bool,
}

pub fn random_signs(m: usize, rng: &mut rng::Rng) -> Array1<f64> {
    Array1::from_iter((0..m).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }))
}

/// `W S` for a diagonal sign matrix given as a vector.
pub fn scale_columns(w: ArrayView2<'_, f64>, s: &Array1<f64>) -> WeightDelta {
    let mut out = w.to_owned();
    for (mut col, &si) in out.axis_iter_mut(Axis(1)).zip(s.iter()) {
        col *= si;
    }
    out
}

/// `W* = W_L + W_Q S` for a fresh sign draw, with statistics of the linear
/// term of `W_Q S` over `trials` draws on the given batch.
pub fn randomized_combine(
    w_l: ArrayView2<'_, f64>,
    w_q: ArrayView2<'_, f64>,
    batch: &BatchCache,
    seed: u64,
    trials: usize,
) -> Result<(WeightDelta, SignReport)> {
    if w_l.dim() != w_q.dim() {
        return Err(shape_err(format!("{:?}", w_l.dim()), format!("{:?}", w_q.dim())));
    }
    let m = w_q.ncols();
    let mut rng = rng::stream(seed, streams::SIGNS);
    let s0 = random_signs(m, &mut rng);
    let w_star = &w_l + &scale_columns(w_q, &s0);
    // f_L(x_i; W S) = sum_r s_r q_ir with q = lin o (X W).
    let q = &batch.lin * &batch.projections(w_q);
    let n = batch.n() as f64;
    let bound24 = w_l.to_owned().norm_2p(4.0) + w_q.to_owned().norm_2p(4.0);
    let mut acc = 0.0;
    let mut triangle_ok = true;
    for t in 0..trials {
        let s = if t == 0 { s0.clone() } else { random_signs(m, &mut rng) };
        let z = q.dot(&s);
        acc += z.dot(&z) / n;
        let combined = &w_l + &scale_columns(w_q, &s);
        triangle_ok &= combined.norm_2p(4.0) <= bound24 * (1.0 + 1e-12);
    }
    let frob = w_q.to_owned().frobenius();
    let reference = frob * frob / m as f64;
    let mean = if trials > 0 { acc / trials as f64 } else { 0.0 };
    let report = SignReport {
        trials,
        mean_linear_energy: mean,
        reference,
        ratio: if reference > 0.0 { mean / reference } else { 0.0 },
        triangle_ok,
    };
    Ok((w_star, report))
}

#[derive(Debug, Clone, Copy, Serialize, Default)]
pub struct RegValues {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpressivityReport {
    pub wq_residual_max: f64,
    pub wl_rmse: f64,
    pub wq_norm24_4: f64,
    pub wq_norm2inf: f64,
    pub wl_frob_sq: f64,
    pub wstar_frob: f64,
    pub wstar_2inf: f64,
    /// Square loss of `f_L + f_Q` at `W*` on the batch.
    pub taylor_loss: f64,
    pub zero_loss: f64,
    pub at_wstar: RegValues,
    pub at_wl: RegValues,
    pub at_wq: RegValues,
}

/// Population regularizers for the report.
pub enum ReportPopulation<'a> {
    Exact(&'a CovarianceSplit),
    Sampled { projector: &'a dyn Projector, fresh: &'a BatchCache },
}

pub struct ReportInputs<'a> {
    pub part: &'a SpectralPartition,
    pub y: ArrayView1<'a, f64>,
    pub y_low: ArrayView1<'a, f64>,
    pub y_sparse: ArrayView1<'a, f64>,
    pub population: ReportPopulation<'a>,
}

fn reg_values(w: ArrayView2<'_, f64>, inputs: &ReportInputs<'_>) -> Result<RegValues> {
    let (r1, r2) = match &inputs.population {
        ReportPopulation::Exact(c) => (c.r1(w)?, c.r2(w)?),
        ReportPopulation::Sampled { projector, fresh } => (
            projected_energy(fresh, *projector, w, true).0,
            projected_energy(fresh, *projector, w, false).0,
        ),
    };
    Ok(RegValues { r1, r2, r3: r3(w, inputs.part), r4: r4(w) })
}

pub fn expressivity_report(
    w_l: ArrayView2<'_, f64>,
    w_q: ArrayView2<'_, f64>,
    w_star: ArrayView2<'_, f64>,
    inputs: &ReportInputs<'_>,
) -> Result<ExpressivityReport> {
    let batch = &inputs.part.features.cache;
    let n = batch.n();
    for (name, v) in [("y", inputs.y), ("y_low", inputs.y_low), ("y_sparse", inputs.y_sparse)] {
        if v.len() != n {
            return Err(shape_err(format!("{name} of length {n}"), format!("{}", v.len())));
        }
    }
    let pq = batch.projections(w_q);
    let fq = batch.quadratic_from(&pq);
    let wq_residual_max = fq
        .iter()
        .zip(inputs.y_sparse.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let fl = batch.linear(w_l);
    let wl_rmse = ((&fl - &inputs.y_low).mapv(|e| e * e).sum() / n as f64).sqrt();
    let loss = LossSpec::square();
    let z_star = batch.outputs(w_star, crate::model::ModelKind::Taylor);
    let taylor_loss = crate::objective::mean_loss(&loss, inputs.y, z_star.view());
    let zeros = Array1::zeros(n);
    let zero_loss = crate::objective::mean_loss(&loss, inputs.y, zeros.view());
    let wq = w_q.to_owned();
    let wl = w_l.to_owned();
    let ws = w_star.to_owned();
    Ok(ExpressivityReport {
        wq_residual_max,
        wl_rmse,
        wq_norm24_4: wq.norm_2p(4.0).powi(4),
        wq_norm2inf: wq.norm_2inf(),
        wl_frob_sq: wl.frobenius().powi(2),
        wstar_frob: ws.frobenius(),
        wstar_2inf: ws.norm_2inf(),
        taylor_loss,
        zero_loss,
        at_wstar: reg_values(w_star, inputs)?,
        at_wl: reg_values(w_l, inputs)?,
        at_wq: reg_values(w_q, inputs)?,
    })
}
