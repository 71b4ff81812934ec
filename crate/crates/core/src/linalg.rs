//! Thin helpers over faer's dense kernels.

use crate::error::{Error, Result};
use faer::linalg::solvers::{DenseSolveCore, Llt, PartialPivLu};
use faer::prelude::*;
use faer::Side;

pub fn cholesky(m: &Mat<f64>, what: &str) -> Result<Llt<f64>> {
    m.llt(Side::Lower)
        .map_err(|_| Error::Singular(format!("{what} is not positive definite")))
}

pub fn col_from(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn col_to_vec(m: &Mat<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Mat<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    Mat::from_fn(nrows, ncols, |i, j| rows[i][j])
}

pub fn to_rows(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn solve_vec(llt: &Llt<f64>, b: &[f64]) -> Vec<f64> {
    let mut x = col_from(b);
    llt.solve_in_place(&mut x);
    col_to_vec(&x)
}

pub fn spd_inverse(m: &Mat<f64>, what: &str) -> Result<Mat<f64>> {
    let llt = cholesky(m, what)?;
    Ok(llt.inverse())
}

pub fn lu(m: &Mat<f64>) -> PartialPivLu<f64> {
    m.partial_piv_lu()
}

/// Upper-triangular `R` of a thin QR decomposition.
pub fn qr_r(m: &Mat<f64>) -> Mat<f64> {
    let qr = m.qr();
    qr.thin_R().to_owned()
}

/// Upper-triangular `R` with `RᵀR = mᵀm` and a nonnegative diagonal.
pub fn qr_r_positive(m: &Mat<f64>) -> Mat<f64> {
    let mut r = qr_r(m);
    for i in 0..r.nrows() {
        if r[(i, i)] < 0.0 {
            for j in i..r.ncols() {
                r[(i, j)] = -r[(i, j)];
            }
        }
    }
    r
}

/// Solves `r x = b` for upper triangular `r`.
pub fn solve_upper(r: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let mut x = b.clone();
    r.solve_upper_triangular_in_place(&mut x);
    x
}

/// Inverse of an upper triangular matrix; errors on a zero pivot.
pub fn upper_inverse(r: &Mat<f64>, what: &str) -> Result<Mat<f64>> {
    let n = r.nrows();
    let scale = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..n {
        if r[(i, i)].abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Singular(format!("{what} has a zero pivot")));
        }
    }
    Ok(solve_upper(r, &Mat::identity(n, n)))
}

pub fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn trace(m: &Mat<f64>) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

/// Trace of `a * b` without forming the product.
pub fn trace_of_product(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    assert_eq!(a.ncols(), b.nrows());
    assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn frobenius(m: &Mat<f64>) -> f64 {
    m.norm_l2()
}

pub fn max_abs(m: &Mat<f64>) -> f64 {
    let mut acc: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            acc = acc.max(m[(i, j)].abs());
        }
    }
    acc
}

pub fn all_finite(m: &Mat<f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].is_finite()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Log-determinant of an SPD matrix from its Cholesky factor.
pub fn llt_logdet(llt: &Llt<f64>) -> f64 {
    let l = llt.L();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// `A ⊗ B` as a dense matrix.
pub fn kron(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let (ra, ca) = (a.nrows(), a.ncols());
    let (rb, cb) = (b.nrows(), b.ncols());
    Mat::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}
