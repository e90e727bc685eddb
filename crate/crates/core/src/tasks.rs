//! Sphere sampling and the low-degree-plus-sparse target family.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

/// n points uniform on the sphere of radius `sqrt d`.
pub fn sample_sphere(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, streams::TRAIN_DATA);
    sample_sphere_with(n, d, &mut rng)
}

pub fn sample_sphere_with(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    let radius = (d as f64).sqrt();
    let mut x = Array2::<f64>::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
    for mut row in x.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        row *= radius / norm;
    }
    x
}

/// Normalized third Hermite polynomial.
pub fn h3(z: f64) -> f64 {
    (z * z * z - 3.0 * z) / 6f64.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetVariant {
    Fig1,
    DenseQuadSparseCubic,
    CustomLowPlusSparse,
}

/// Shape of each sparse ridge term `alpha g(beta^T x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RidgeKind {
    /// `z^(k+1)`.
    Power,
    /// `h3(z)`.
    Hermite3,
}

/// Degree-at-most-two low part `c0 + c^T x + x^T A x`.
#[derive(Debug, Clone)]
pub struct LowDegree {
    pub c0: f64,
    pub c: Array1<f64>,
    pub a: Option<Array2<f64>>,
}

impl LowDegree {
    pub fn eval(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut v = self.c0 + self.c.dot(&x);
        if let Some(a) = &self.a {
            v += x.dot(&a.dot(&x));
        }
        v
    }

    pub fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut v = x.dot(&self.c) + self.c0;
        if let Some(a) = &self.a {
            v += &(&x.dot(a) * &x).sum_axis(Axis(1));
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct SparseTerm {
    pub alpha: f64,
    pub beta: Array1<f64>,
}

/// `f*(x) = f_k(x) + sum_i alpha_i g(beta_i^T x)`.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub variant: TargetVariant,
    pub d: usize,
    /// Degree of the low part; ridge powers have degree `k + 1`.
    pub k: usize,
    pub low: LowDegree,
    pub ridge: RidgeKind,
    pub sparse: Vec<SparseTerm>,
}

fn random_unit(d: usize, rng: &mut Rng) -> Array1<f64> {
    let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

/// `f*(x) = x_1 - 1 + (beta^T x)^2`.
pub fn make_fig1_target(d: usize, seed: u64) -> Result<TargetSpec> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("fig1 target needs d >= 2, got {d}")));
    }
    let mut rng = rng::stream(seed, streams::TARGET);
    let beta = random_unit(d, &mut rng);
    let mut c = Array1::zeros(d);
    c[0] = 1.0;
    Ok(TargetSpec {
        variant: TargetVariant::Fig1,
        d,
        k: 1,
        low: LowDegree { c0: -1.0, c, a: None },
        ridge: RidgeKind::Power,
        sparse: vec![SparseTerm { alpha: 1.0, beta }],
    })
}

/// Samples used to normalize the dense quadratic.
pub const QUAD_NORMALIZE_SAMPLES: usize = 1_000_000;

/// Mean of `(x^T A x - Tr A)^2` over sphere samples drawn from `rng`.
fn quad_second_moment(a: &Array2<f64>, samples: usize, rng: &mut Rng) -> f64 {
    let d = a.nrows();
    let tr = a.diag().sum();
    let mut acc = 0.0;
    let mut done = 0;
    while done < samples {
        let b = 8192.min(samples - done);
        let x = sample_sphere_with(b, d, rng);
        let q = (&x.dot(a) * &x).sum_axis(Axis(1));
        acc += q.iter().map(|v| (v - tr).powi(2)).sum::<f64>();
        done += b;
    }
    acc / samples as f64
}

/// `f*(x) = x^T A x - Tr A + h3(beta^T x)` with A a Gaussian symmetric matrix
/// scaled to unit L2 norm of the quadratic part.
pub fn make_dense_quad_sparse_cubic(d: usize, seed: u64) -> Result<TargetSpec> {
    if d < 3 {
        return Err(Error::InvalidArgument(format!("dense-quad target needs d >= 3, got {d}")));
    }
    let mut rng = rng::stream(seed, streams::TARGET);
    let g = Array2::from_shape_simple_fn((d, d), || -> f64 { StandardNormal.sample(&mut rng) });
    let mut a = (&g + &g.t()) * 0.5;
    let beta = random_unit(d, &mut rng);
    let mut aux = rng::stream(seed, streams::TARGET_NORMALIZE);
    let norm = quad_second_moment(&a, QUAD_NORMALIZE_SAMPLES, &mut aux).sqrt();
    a /= norm;
    let tr = a.diag().sum();
    Ok(TargetSpec {
        variant: TargetVariant::DenseQuadSparseCubic,
        d,
        k: 2,
        low: LowDegree { c0: -tr, c: Array1::zeros(d), a: Some(a) },
        ridge: RidgeKind::Hermite3,
        sparse: vec![SparseTerm { alpha: 1.0, beta }],
    })
}

/// Arbitrary low part plus `R` power ridges with the given amplitudes and
/// random unit directions.
pub fn make_custom_target(low: LowDegree, k: usize, alphas: &[f64], seed: u64) -> Result<TargetSpec> {
    let d = low.c.len();
    if alphas.iter().any(|a| a.abs() > 1.0 || !a.is_finite()) {
        return Err(Error::InvalidArgument("ridge amplitudes must lie in [-1, 1]".into()));
    }
    if let Some(a) = &low.a {
        if a.dim() != (d, d) {
            return Err(Error::InvalidArgument("quadratic part must be d x d".into()));
        }
        if k < 2 {
            return Err(Error::InvalidArgument("quadratic low part needs k >= 2".into()));
        }
    }
    let mut rng = rng::stream(seed, streams::TARGET);
    let sparse = alphas
        .iter()
        .map(|&alpha| SparseTerm { alpha, beta: random_unit(d, &mut rng) })
        .collect();
    Ok(TargetSpec {
        variant: TargetVariant::CustomLowPlusSparse,
        d,
        k,
        low,
        ridge: RidgeKind::Power,
        sparse,
    })
}

impl TargetSpec {
    pub fn rank(&self) -> usize {
        self.sparse.len()
    }

    fn ridge(&self, z: f64) -> f64 {
        match self.ridge {
            RidgeKind::Power => z.powi(self.k as i32 + 1),
            RidgeKind::Hermite3 => h3(z),
        }
    }

    pub fn eval_sparse(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.sparse.iter().map(|t| t.alpha * self.ridge(t.beta.dot(&x))).sum()
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.low.eval(x) + self.eval_sparse(x)
    }

    pub fn eval_low_batch(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        self.low.eval_batch(x)
    }

    pub fn eval_sparse_batch(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(x.nrows());
        for t in &self.sparse {
            let z = x.dot(&t.beta);
            out.zip_mut_with(&z, |o, &zi| *o += t.alpha * self.ridge(zi));
        }
        out
    }

    pub fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        self.eval_low_batch(x) + self.eval_sparse_batch(x)
    }
}

/// Noiseless train and test samples of a target.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x_train: Array2<f64>,
    pub y_train: Array1<f64>,
    pub x_test: Array2<f64>,
    pub y_test: Array1<f64>,
    pub k: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn d(&self) -> usize {
        self.x_train.ncols()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }
}

pub fn build_dataset(spec: &TargetSpec, n_train: usize, n_test: usize, seed: u64) -> Dataset {
    let d = spec.d;
    let x_train = sample_sphere_with(n_train, d, &mut rng::stream(seed, streams::TRAIN_DATA));
    let x_test = sample_sphere_with(n_test, d, &mut rng::stream(seed, streams::TEST_DATA));
    let y_train = spec.eval_batch(x_train.view());
    let y_test = spec.eval_batch(x_test.view());
    Dataset { x_train, y_train, x_test, y_test, k: spec.k, seed }
}

/// CSV with columns `x1..xd,y`.
pub fn write_csv(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = x.ncols();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (row, yi) in x.rows().into_iter().zip(y.iter()) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        rec.push(format!("{yi:e}"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut r = csv::Reader::from_reader(input);
    let cols = r.headers()?.len();
    if cols < 2 {
        return Err(Error::InvalidArgument("dataset csv needs at least one x column and y".into()));
    }
    let mut flat = Vec::new();
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        flat.extend_from_slice(&vals[..cols - 1]);
        ys.push(vals[cols - 1]);
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, cols - 1), flat).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((x, Array1::from(ys)))
}

/// Little-endian: `n`, `d` as u64, then n rows of `x_1..x_d, y` as f64.
pub fn write_binary(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, out: &mut impl Write) -> Result<()> {
    let (n, d) = x.dim();
    out.write_all(&(n as u64).to_le_bytes())?;
    out.write_all(&(d as u64).to_le_bytes())?;
    for (row, yi) in x.rows().into_iter().zip(y.iter()) {
        for v in row.iter().chain(std::iter::once(yi)) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary(input: &mut impl Read) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let d = u64::from_le_bytes(word) as usize;
    let mut x = Array2::zeros((n, d));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        for j in 0..=d {
            input.read_exact(&mut word)?;
            let v = f64::from_le_bytes(word);
            if j < d {
                x[[i, j]] = v;
            } else {
                y[i] = v;
            }
        }
    }
    Ok((x, y))
}
