//! Two-layer network with symmetric initialization and its first/second-order
//! Taylor terms around the initialization.
//!
//! `f(x; W) = m^{-1/2} sum_r a_r sigma((w0_r + w_r)^T x)` where only the
//! displacement `W` (d x m) is trainable.

mod activation;

pub use activation::Activation;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::harmonics::HermiteRule;
use crate::linalg;
use crate::rng::{self, streams};

/// Trainable displacement from initialization, d x m, column r is `w_r`.
pub type WeightDelta = Array2<f64>;

/// Norms used throughout the analysis.
pub trait WeightNorms {
    fn frobenius(&self) -> f64;
    fn norm_2p(&self, p: f64) -> f64;
    fn norm_2inf(&self) -> f64;
}

impl WeightNorms for Array2<f64> {
    fn frobenius(&self) -> f64 {
        linalg::frobenius(self.view())
    }
    fn norm_2p(&self, p: f64) -> f64 {
        linalg::norm_2p(self.view(), p)
    }
    fn norm_2inf(&self) -> f64 {
        linalg::norm_2inf(self.view())
    }
}

/// Which forward map a gradient or objective refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// The network itself.
    Full,
    /// `f_L + f_Q`, the second-order expansion at the initialization.
    Taylor,
}

/// Frozen first layer `W0` (unit columns) and second-layer signs `a`.
#[derive(Debug, Clone)]
pub struct NetworkInit {
    pub w0: Array2<f64>,
    pub a: Array1<f64>,
    pub seed: u64,
}

impl NetworkInit {
    pub fn d(&self) -> usize {
        self.w0.nrows()
    }

    pub fn m(&self) -> usize {
        self.w0.ncols()
    }

    fn check_x(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.d() {
            return Err(shape_err(format!("x of length {}", self.d()), format!("{}", x.len())));
        }
        Ok(())
    }

    fn check_w(&self, w: ArrayView2<'_, f64>) -> Result<()> {
        if w.dim() != self.w0.dim() {
            return Err(shape_err(format!("W of shape {:?}", self.w0.dim()), format!("{:?}", w.dim())));
        }
        Ok(())
    }
}

/// Symmetric initialization: `a_r = +1` for the first half and `-1` for the
/// second, with `w0_{m/2+r} = w0_r` drawn uniformly from the unit sphere.
pub fn init_symmetric(d: usize, m: usize, seed: u64) -> Result<NetworkInit> {
    if m == 0 || m % 2 != 0 {
        return Err(Error::InvalidArgument(format!("width m must be even and positive, got {m}")));
    }
    if d < 3 {
        return Err(Error::InvalidArgument(format!("dimension d must be at least 3, got {d}")));
    }
    let mut rng = rng::stream(seed, streams::INIT);
    let half = m / 2;
    let mut w0 = Array2::zeros((d, m));
    for r in 0..half {
        let mut col: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = col.dot(&col).sqrt();
        col /= norm;
        w0.column_mut(r).assign(&col);
        w0.column_mut(r + half).assign(&col);
    }
    let a = Array1::from_iter((0..m).map(|r| if r < half { 1.0 } else { -1.0 }));
    Ok(NetworkInit { w0, a, seed })
}

/// Accumulates positive- and negative-sign neurons separately so that the
/// symmetric initialization cancels exactly at `W = 0`.
#[derive(Default)]
struct SignedSum {
    pos: f64,
    neg: f64,
}

impl SignedSum {
    fn add(&mut self, a: f64, v: f64) {
        if a >= 0.0 {
            self.pos += a * v;
        } else {
            self.neg -= a * v;
        }
    }

    fn total(&self) -> f64 {
        self.pos - self.neg
    }
}

/// `f(x; W)`.
pub fn forward_full(x: ArrayView1<'_, f64>, init: &NetworkInit, act: &Activation, w: ArrayView2<'_, f64>) -> Result<f64> {
    init.check_x(x)?;
    init.check_w(w)?;
    let m = init.m();
    let mut sums = SignedSum::default();
    for r in 0..m {
        let z = init.w0.column(r).dot(&x) + w.column(r).dot(&x);
        sums.add(init.a[r], act.value(z));
    }
    Ok(sums.total() / (m as f64).sqrt())
}

/// `f_L(x; W) = m^{-1/2} sum_r a_r sigma'(w0_r^T x) x^T w_r`.
pub fn forward_linear(x: ArrayView1<'_, f64>, init: &NetworkInit, act: &Activation, w: ArrayView2<'_, f64>) -> Result<f64> {
    init.check_x(x)?;
    init.check_w(w)?;
    let m = init.m();
    let mut acc = 0.0;
    for r in 0..m {
        let pre = init.w0.column(r).dot(&x);
        acc += init.a[r] * act.d1(pre) * w.column(r).dot(&x);
    }
    Ok(acc / (m as f64).sqrt())
}

/// `f_Q(x; W) = (2 sqrt m)^{-1} sum_r a_r sigma''(w0_r^T x) (x^T w_r)^2`.
pub fn forward_quadratic(x: ArrayView1<'_, f64>, init: &NetworkInit, act: &Activation, w: ArrayView2<'_, f64>) -> Result<f64> {
    init.check_x(x)?;
    init.check_w(w)?;
    let m = init.m();
    let mut acc = 0.0;
    for r in 0..m {
        let pre = init.w0.column(r).dot(&x);
        let p = w.column(r).dot(&x);
        acc += init.a[r] * act.d2(pre) * p * p;
    }
    Ok(acc / (2.0 * (m as f64).sqrt()))
}

/// Exact gradient of the selected forward map with respect to `W`.
/// Column r is always a multiple of `x`.
pub fn grad_model(
    x: ArrayView1<'_, f64>,
    init: &NetworkInit,
    act: &Activation,
    w: ArrayView2<'_, f64>,
    which: ModelKind,
) -> Result<WeightDelta> {
    init.check_x(x)?;
    init.check_w(w)?;
    let (d, m) = init.w0.dim();
    let scale = 1.0 / (m as f64).sqrt();
    let mut g = Array2::zeros((d, m));
    for r in 0..m {
        let pre = init.w0.column(r).dot(&x);
        let p = w.column(r).dot(&x);
        let coef = match which {
            ModelKind::Full => act.d1(pre + p),
            ModelKind::Taylor => act.d1(pre) + act.d2(pre) * p,
        };
        g.column_mut(r).assign(&(&x * (init.a[r] * scale * coef)));
    }
    Ok(g)
}

/// Per-sample quantities at the initialization for a fixed input batch, so the
/// batched forward and backward passes reduce to two matrix products with `X`.
#[derive(Debug, Clone)]
pub struct BatchCache {
    /// n x d inputs.
    pub x: Array2<f64>,
    /// n x m pre-activations `X W0`.
    pub pre: Array2<f64>,
    /// `a_r sigma'(pre) / sqrt m`.
    pub lin: Array2<f64>,
    /// `a_r sigma''(pre) / sqrt m`.
    pub quad: Array2<f64>,
    pub a: Array1<f64>,
    pub act: Activation,
}

impl BatchCache {
    pub fn new(x: Array2<f64>, init: &NetworkInit, act: &Activation) -> Result<Self> {
        if x.ncols() != init.d() {
            return Err(shape_err(format!("inputs with {} columns", init.d()), format!("{}", x.ncols())));
        }
        let m = init.m();
        let scale = 1.0 / (m as f64).sqrt();
        let pre = x.dot(&init.w0);
        let mut lin = pre.mapv(|z| act.d1(z) * scale);
        let mut quad = pre.mapv(|z| act.d2(z) * scale);
        for (mut col_l, (mut col_q, &ar)) in lin
            .axis_iter_mut(Axis(1))
            .zip(quad.axis_iter_mut(Axis(1)).zip(init.a.iter()))
        {
            col_l *= ar;
            col_q *= ar;
        }
        Ok(Self { x, pre, lin, quad, a: init.a.clone(), act: *act })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.pre.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// `X W`, the n x m matrix of `x_i^T w_r`.
    pub fn projections(&self, w: ArrayView2<'_, f64>) -> Array2<f64> {
        self.x.dot(&w)
    }

    pub fn linear_from(&self, p: &Array2<f64>) -> Array1<f64> {
        (&self.lin * p).sum_axis(Axis(1))
    }

    pub fn quadratic_from(&self, p: &Array2<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.n());
        Zip::from(&mut out)
            .and(self.quad.rows())
            .and(p.rows())
            .for_each(|o, q, pr| *o = 0.5 * q.iter().zip(pr.iter()).map(|(a, b)| a * b * b).sum::<f64>());
        out
    }

    pub fn full_from(&self, p: &Array2<f64>) -> Array1<f64> {
        let m = self.m();
        let scale = 1.0 / (m as f64).sqrt();
        let mut out = Array1::zeros(self.n());
        for i in 0..self.n() {
            let mut sums = SignedSum::default();
            for r in 0..m {
                sums.add(self.a[r], self.act.value(self.pre[[i, r]] + p[[i, r]]));
            }
            out[i] = sums.total() * scale;
        }
        out
    }

    /// Full-model outputs and the per-sample gradient coefficients
    /// `a_r sigma'(.) / sqrt m`, from one logistic evaluation per entry.
    pub fn full_with_coef(&self, p: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
        let m = self.m();
        let scale = 1.0 / (m as f64).sqrt();
        let mut out = Array1::zeros(self.n());
        let mut coef = Array2::zeros((self.n(), m));
        for i in 0..self.n() {
            let mut sums = SignedSum::default();
            for r in 0..m {
                let s = self.act.value(self.pre[[i, r]] + p[[i, r]]);
                sums.add(self.a[r], s);
                coef[[i, r]] = self.a[r] * scale * (s * (1.0 - s));
            }
            out[i] = sums.total() * scale;
        }
        (out, coef)
    }

    /// `X^T (coef o g + lin o h)` with `g`, `h` scaling rows.
    pub fn adjoint_rows(&self, mut coef: Array2<f64>, g: ArrayView1<'_, f64>, h: Option<ArrayView1<'_, f64>>) -> Array2<f64> {
        match h {
            Some(h) => Zip::from(coef.rows_mut()).and(self.lin.rows()).and(&g).and(&h).for_each(|mut c, l, &gi, &hi| {
                c.zip_mut_with(&l, |cv, &lv| *cv = *cv * gi + lv * hi);
            }),
            None => {
                for (mut row, &gi) in coef.axis_iter_mut(Axis(0)).zip(g.iter()) {
                    row *= gi;
                }
            }
        }
        self.x.t().dot(&coef)
    }

    /// Outputs of the selected model on every cached input.
    pub fn outputs(&self, w: ArrayView2<'_, f64>, which: ModelKind) -> Array1<f64> {
        let p = self.projections(w);
        match which {
            ModelKind::Full => self.full_from(&p),
            ModelKind::Taylor => self.linear_from(&p) + self.quadratic_from(&p),
        }
    }

    /// `sum_i g_i grad_W f(x_i; W)` for per-sample weights `g`.
    pub fn weighted_grad(&self, p: &Array2<f64>, g: ArrayView1<'_, f64>, which: ModelKind) -> Array2<f64> {
        let mut coef = match which {
            ModelKind::Taylor => &self.lin + &(&self.quad * p),
            ModelKind::Full => {
                let scale = 1.0 / (self.m() as f64).sqrt();
                let mut c = &self.pre + p;
                for (mut col, &ar) in c.axis_iter_mut(Axis(1)).zip(self.a.iter()) {
                    col.mapv_inplace(|z| ar * scale * self.act.d1(z));
                }
                c
            }
        };
        for (mut row, &gi) in coef.axis_iter_mut(Axis(0)).zip(g.iter()) {
            row *= gi;
        }
        self.x.t().dot(&coef)
    }

    /// `sum_i v_i phi(x_i)` reshaped to d x m: the adjoint of `f_L` on the batch.
    pub fn linear_adjoint(&self, v: ArrayView1<'_, f64>) -> Array2<f64> {
        let mut coef = self.lin.clone();
        for (mut row, &vi) in coef.axis_iter_mut(Axis(0)).zip(v.iter()) {
            row *= vi;
        }
        self.x.t().dot(&coef)
    }

    /// `f_L(x_i; W)` for every cached input.
    pub fn linear(&self, w: ArrayView2<'_, f64>) -> Array1<f64> {
        self.linear_from(&self.projections(w))
    }
}

/// Hermite coefficients `mu_l` of a function for `l <= max_degree`, flagging
/// those with magnitude below `1e-8`.
#[derive(Debug, Clone)]
pub struct HermiteReport {
    pub coeffs: Vec<f64>,
    pub flagged: Vec<usize>,
}

impl HermiteReport {
    pub fn satisfied(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub const HERMITE_FLAG_TOL: f64 = 1e-8;

pub fn hermite_profile(f: impl Fn(f64) -> f64, max_degree: usize) -> HermiteReport {
    let rule = HermiteRule::new(HermiteRule::DEFAULT_NODES);
    let coeffs: Vec<f64> = (0..=max_degree).map(|k| rule.coeff(&f, k)).collect();
    let flagged = coeffs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.abs() < HERMITE_FLAG_TOL)
        .map(|(i, _)| i)
        .collect();
    HermiteReport { coeffs, flagged }
}

/// Checks that `mu_l(sigma') != 0` for `l <= 4k`.
pub fn check_hermite_assumption(act: &Activation, k: usize) -> HermiteReport {
    let a = *act;
    hermite_profile(move |z| a.d1(z), 4 * k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonics::hermite_fn;
    use crate::rng::Rng;
    use rand::Rng as _;

    fn random_w(d: usize, m: usize, scale: f64, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((d, m), |_| scale * rng.gen_range(-1.0..1.0))
    }

    fn random_x(d: usize, rng: &mut Rng) -> Array1<f64> {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        v * ((d as f64).sqrt() / n)
    }

    #[test]
    fn init_rejects_odd_width() {
        assert!(init_symmetric(5, 7, 0).is_err());
        assert!(init_symmetric(2, 8, 0).is_err());
    }

    #[test]
    fn init_is_symmetric_and_unit() {
        let init = init_symmetric(6, 10, 3).unwrap();
        for r in 0..5 {
            assert_eq!(init.w0.column(r), init.w0.column(r + 5));
            let n = init.w0.column(r).dot(&init.w0.column(r)).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(init.a[r], 1.0);
            assert_eq!(init.a[r + 5], -1.0);
        }
        let again = init_symmetric(6, 10, 3).unwrap();
        assert_eq!(init.w0, again.w0);
    }

    #[test]
    fn network_vanishes_at_zero() {
        let init = init_symmetric(7, 12, 1).unwrap();
        let act = Activation::default();
        let mut rng = rng::stream(9, 0);
        let zero = Array2::zeros((7, 12));
        for _ in 0..20 {
            let x = random_x(7, &mut rng);
            assert_eq!(forward_full(x.view(), &init, &act, zero.view()).unwrap(), 0.0);
        }
    }

    #[test]
    fn hand_evaluated_width_two() {
        // Width 2 with a = (+1, -1); dimension 3 so the init is valid, then
        // overwrite the weights by hand.
        let mut init = init_symmetric(3, 2, 0).unwrap();
        init.w0 = ndarray::array![[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        let act = Activation::default();
        let w = ndarray::array![[0.5, -0.25], [1.0, 0.0], [0.0, 2.0]];
        let x = ndarray::array![0.3, -1.2, 0.7];
        let sig = |z: f64| 1.0 / (1.0 + (0.5 - z).exp());
        let z1 = (1.0 + 0.5) * 0.3 + 1.0 * -1.2;
        let z2 = (1.0 - 0.25) * 0.3 + 2.0 * 0.7;
        let expected = (sig(z1) - sig(z2)) / 2.0_f64.sqrt();
        let got = forward_full(x.view(), &init, &act, w.view()).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn homogeneity_and_sign_invariance() {
        let init = init_symmetric(5, 8, 2).unwrap();
        let act = Activation::default();
        let mut rng = rng::stream(4, 0);
        let w = random_w(5, 8, 0.7, &mut rng);
        let x = random_x(5, &mut rng);
        let c = -1.7;
        let wc = &w * c;
        let fl = forward_linear(x.view(), &init, &act, w.view()).unwrap();
        let fq = forward_quadratic(x.view(), &init, &act, w.view()).unwrap();
        assert!((forward_linear(x.view(), &init, &act, wc.view()).unwrap() - c * fl).abs() < 1e-12);
        assert!((forward_quadratic(x.view(), &init, &act, wc.view()).unwrap() - c * c * fq).abs() < 1e-12);
        let mut ws = w.clone();
        for r in 0..8 {
            if rng.gen_bool(0.5) {
                ws.column_mut(r).mapv_inplace(|v| -v);
            }
        }
        let fqs = forward_quadratic(x.view(), &init, &act, ws.view()).unwrap();
        assert!((fqs - fq).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let init = init_symmetric(4, 6, 5).unwrap();
        let act = Activation::default();
        let mut rng = rng::stream(5, 1);
        for _ in 0..10 {
            let w = random_w(4, 6, 0.5, &mut rng);
            let x = random_x(4, &mut rng);
            for which in [ModelKind::Full, ModelKind::Taylor] {
                let g = grad_model(x.view(), &init, &act, w.view(), which).unwrap();
                let f = |w: &Array2<f64>| match which {
                    ModelKind::Full => forward_full(x.view(), &init, &act, w.view()).unwrap(),
                    ModelKind::Taylor => {
                        forward_linear(x.view(), &init, &act, w.view()).unwrap()
                            + forward_quadratic(x.view(), &init, &act, w.view()).unwrap()
                    }
                };
                let h = 1e-5;
                for s in 0..4 {
                    for r in 0..6 {
                        let mut wp = w.clone();
                        wp[[s, r]] += h;
                        let mut wm = w.clone();
                        wm[[s, r]] -= h;
                        let fd = (f(&wp) - f(&wm)) / (2.0 * h);
                        let tol = 1e-5 * fd.abs().max(g[[s, r]].abs()).max(1e-3);
                        assert!((fd - g[[s, r]]).abs() < tol, "{which:?} ({s},{r}): {fd} vs {}", g[[s, r]]);
                    }
                }
                // column r parallel to x
                for r in 0..6 {
                    let col = g.column(r);
                    let along = col.dot(&x) / x.dot(&x);
                    let resid = &col - &(&x * along);
                    assert!(resid.dot(&resid).sqrt() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn full_and_taylor_gradients_agree_at_zero() {
        let init = init_symmetric(5, 6, 7).unwrap();
        let act = Activation::default();
        let mut rng = rng::stream(7, 0);
        let x = random_x(5, &mut rng);
        let zero = Array2::zeros((5, 6));
        let gf = grad_model(x.view(), &init, &act, zero.view(), ModelKind::Full).unwrap();
        let gt = grad_model(x.view(), &init, &act, zero.view(), ModelKind::Taylor).unwrap();
        assert_eq!(gf, gt);
    }

    #[test]
    fn batch_matches_pointwise() {
        let init = init_symmetric(5, 8, 11).unwrap();
        let act = Activation::default();
        let mut rng = rng::stream(11, 0);
        let w = random_w(5, 8, 0.4, &mut rng);
        let xs = Array2::from_shape_fn((7, 5), |_| StandardNormal.sample(&mut rng));
        let batch = BatchCache::new(xs.clone(), &init, &act).unwrap();
        let full = batch.outputs(w.view(), ModelKind::Full);
        let tay = batch.outputs(w.view(), ModelKind::Taylor);
        let g = Array1::from_iter((0..7).map(|i| i as f64 - 3.0));
        for which in [ModelKind::Full, ModelKind::Taylor] {
            let p = batch.projections(w.view());
            let bg = batch.weighted_grad(&p, g.view(), which);
            let mut expect = Array2::<f64>::zeros((5, 8));
            for i in 0..7 {
                expect = expect + grad_model(xs.row(i), &init, &act, w.view(), which).unwrap() * g[i];
            }
            assert!((&bg - &expect).iter().all(|v| v.abs() < 1e-12));
        }
        for i in 0..7 {
            let x = xs.row(i);
            assert!((full[i] - forward_full(x, &init, &act, w.view()).unwrap()).abs() < 1e-13);
            let t = forward_linear(x, &init, &act, w.view()).unwrap()
                + forward_quadratic(x, &init, &act, w.view()).unwrap();
            assert!((tay[i] - t).abs() < 1e-13);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let init = init_symmetric(4, 4, 0).unwrap();
        let act = Activation::default();
        let x = Array1::zeros(3);
        let w = Array2::zeros((4, 4));
        assert!(forward_full(x.view(), &init, &act, w.view()).is_err());
        let x = Array1::zeros(4);
        let w = Array2::zeros((4, 3));
        assert!(forward_linear(x.view(), &init, &act, w.view()).is_err());
    }

    #[test]
    fn hermite_assumption_flags_unshifted_sigmoid() {
        let report = check_hermite_assumption(&Activation::new(0.0), 1);
        assert!(report.flagged.contains(&1));
        assert!(report.flagged.contains(&3));
        let report = check_hermite_assumption(&Activation::new(0.5), 1);
        assert!(report.satisfied(), "{:?}", report.coeffs);
        let h3 = hermite_profile(|z| hermite_fn(3, z), 4);
        assert_eq!(h3.flagged, vec![0, 1, 2, 4]);
        assert!((h3.coeffs[3] - 1.0).abs() < 1e-10);
    }
}
