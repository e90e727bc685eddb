//! Small dense helpers shared across modules. Symmetric eigendecompositions
//! are delegated to nalgebra; everything else stays in ndarray.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
///
/// Ties are broken by the eigensolver's original index so the ordering is
/// reproducible for a given input.
pub struct SortedEigen {
    pub values: Array1<f64>,
    /// Column `i` is the eigenvector for `values[i]`.
    pub vectors: Array2<f64>,
}

pub fn sym_eigen_desc(a: ArrayView2<'_, f64>) -> SortedEigen {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Array2::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, new]] = eig.eigenvectors[(row, old)];
        }
    }
    SortedEigen { values, vectors }
}

/// Largest singular value of a symmetric matrix (spectral norm).
pub fn sym_op_norm(a: ArrayView2<'_, f64>) -> f64 {
    let e = sym_eigen_desc(a);
    e.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_asymmetry(a: ArrayView2<'_, f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Column norms of a d x m weight matrix.
pub fn column_norms(w: ArrayView2<'_, f64>) -> Array1<f64> {
    w.map_axis(Axis(0), |c| c.dot(&c).sqrt())
}

pub fn frobenius(w: ArrayView2<'_, f64>) -> f64 {
    w.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `||W||_{2,p} = (sum_r ||w_r||^p)^{1/p}` over columns.
pub fn norm_2p(w: ArrayView2<'_, f64>, p: f64) -> f64 {
    column_norms(w)
        .iter()
        .map(|c| c.powf(p))
        .sum::<f64>()
        .powf(1.0 / p)
}

pub fn norm_2inf(w: ArrayView2<'_, f64>) -> f64 {
    column_norms(w).iter().fold(0.0_f64, |a, &b| a.max(b))
}

/// Column-major flattening: column r of the d x m matrix occupies
/// entries `r*d .. (r+1)*d`.
pub fn vec_cols(w: ArrayView2<'_, f64>) -> Array1<f64> {
    let (d, m) = w.dim();
    let mut out = Array1::zeros(d * m);
    for r in 0..m {
        for s in 0..d {
            out[r * d + s] = w[[s, r]];
        }
    }
    out
}

pub fn unvec_cols(v: &Array1<f64>, d: usize, m: usize) -> Array2<f64> {
    debug_assert_eq!(v.len(), d * m);
    Array2::from_shape_fn((d, m), |(s, r)| v[r * d + s])
}

pub fn inner(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Solve a 3x3 system by Gaussian elimination with partial pivoting.
/// Returns `None` when the pivot falls below `tol` relative to the row scale.
pub fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3], tol: f64) -> Option<[f64; 3]> {
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |s, v| s.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[piv][col].abs() <= tol * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in (row + 1)..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}
