//! Compressed sparse row storage for the assembled FEM and basis matrices.
//!
//! Triplets are reduced in a fixed (row, col, insertion) order, so assembly
//! results do not depend on how contributions were produced.

use faer::Mat;
use std::io::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        // stable sort keeps insertion order among duplicates
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));

        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(m: &Mat<f64>, drop_tol: f64) -> Self {
        let mut trip = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v.abs() > drop_tol {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    /// `selfᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j] += v * xi;
            }
        }
        out
    }

    /// `self * m` for a dense right factor.
    pub fn mul_dense(&self, m: &Mat<f64>) -> Mat<f64> {
        assert_eq!(m.nrows(), self.ncols);
        let mut out = Mat::zeros(self.nrows, m.ncols());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for c in 0..m.ncols() {
                let mut acc = 0.0;
                for (&j, &v) in cols.iter().zip(vals) {
                    acc += v * m[(j, c)];
                }
                out[(i, c)] = acc;
            }
        }
        out
    }

    /// `selfᵀ * m` for a dense right factor.
    pub fn tr_mul_dense(&self, m: &Mat<f64>) -> Mat<f64> {
        assert_eq!(m.nrows(), self.nrows);
        let mut out = Mat::zeros(self.ncols, m.ncols());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for c in 0..m.ncols() {
                let mi = m[(i, c)];
                if mi == 0.0 {
                    continue;
                }
                for (&j, &v) in cols.iter().zip(vals) {
                    out[(j, c)] += v * mi;
                }
            }
        }
        out
    }

    /// Dense `selfᵀ self`.
    pub fn gram(&self) -> Mat<f64> {
        let mut out = Mat::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (a, &ja) in cols.iter().enumerate() {
                for (b, &jb) in cols.iter().enumerate() {
                    out[(ja, jb)] += vals[a] * vals[b];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &trip)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut out = Mat::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            out[(i, j)] = v;
        }
        out
    }

    /// Rows picked in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut trip = Vec::new();
        for (new_i, &i) in rows.iter().enumerate() {
            let (cols, vals) = self.row(i);
            trip.extend(cols.iter().zip(vals).map(|(&j, &v)| (new_i, j, v)));
        }
        Self::from_triplets(rows.len(), self.ncols, &trip)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Entrywise sum of two matrices of equal shape.
    pub fn add(&self, other: &CsrMatrix) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let trip: Vec<_> = self.triplets().chain(other.triplets()).collect();
        Self::from_triplets(self.nrows, self.ncols, &trip)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Writes the coordinate list as `row,col,value` lines.
    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,value")?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{i},{j},{v:e}")?;
        }
        Ok(())
    }
}
