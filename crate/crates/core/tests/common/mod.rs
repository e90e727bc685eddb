#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use qntk_core::linalg::frobenius;
use qntk_core::objective::Differentiable;
use qntk_core::rng::{self, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Columns with independent norms uniform in `[0, max_norm]`.
pub fn bounded_columns(d: usize, m: usize, max_norm: f64, rng: &mut Rng) -> Array2<f64> {
    let mut w = gaussian((d, m), rng);
    for mut col in w.columns_mut() {
        let n = col.dot(&col).sqrt();
        let target = max_norm * rng.gen::<f64>();
        col *= target / n;
    }
    w
}

pub fn sphere_point(d: usize, rng: &mut Rng) -> Array1<f64> {
    let g: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = g.dot(&g).sqrt();
    g * ((d as f64).sqrt() / n)
}

pub fn rng(seed: u64) -> Rng {
    rng::stream(seed, 99)
}

/// Entrywise central differences of a scalar function of `W`.
pub fn fd_grad(f: impl Fn(ArrayView2<'_, f64>) -> f64, w: ArrayView2<'_, f64>, h: f64) -> Array2<f64> {
    let mut g = Array2::zeros(w.dim());
    let mut probe = w.to_owned();
    for idx in 0..w.len() {
        let (i, j) = (idx / w.ncols(), idx % w.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let plus = f(probe.view());
        probe[[i, j]] = orig - h;
        let minus = f(probe.view());
        probe[[i, j]] = orig;
        g[[i, j]] = (plus - minus) / (2.0 * h);
    }
    g
}

/// `|a - b|_F / max(|b|_F, floor)`.
pub fn rel_err(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, floor: f64) -> f64 {
    frobenius((&a - &b).view()) / frobenius(b).max(floor)
}

/// `0.5 vec(W)^T A vec(W)` with column-major vec.
pub struct Quadratic {
    pub a: Array2<f64>,
    pub shape: (usize, usize),
}

impl Differentiable for Quadratic {
    fn value_grad(&self, w: ArrayView2<'_, f64>) -> qntk_core::Result<(f64, Array2<f64>)> {
        let v = qntk_core::linalg::vec_cols(w);
        let av = self.a.dot(&v);
        Ok((0.5 * v.dot(&av), qntk_core::linalg::unvec_cols(&av, self.shape.0, self.shape.1)))
    }
}

pub fn random_symmetric(dim: usize, rng: &mut Rng) -> Array2<f64> {
    let g = gaussian((dim, dim), rng);
    (&g + &g.t()) * 0.5
}

/// Parses a headered CSV into its header and rows of strings.
pub fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

pub fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<String> {
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("missing column {name}"));
    rows.iter().map(|r| r[j].clone()).collect()
}

pub fn column_f64(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    column(header, rows, name).iter().map(|s| s.parse().unwrap()).collect()
}
