//! Minimal dense and sparse linear algebra for the solver and regressions.
//!
//! Nothing here is generic over scalars; everything is `f64`, row-major, and
//! sized for the problems this crate actually builds (a few thousand rows).

use std::fmt;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        debug_assert!(rows.iter().all(|row| row.len() == c));
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_assign_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `y = self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Incremental CSR builder; rows are appended in order.
pub struct CsrBuilder {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(ncols: usize) -> Self {
        CsrBuilder {
            ncols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Append a row given as (column, value) pairs. Zero entries are dropped.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            debug_assert!(c < self.ncols);
            if v != 0.0 {
                self.indices.push(c);
                self.values.push(v);
            }
        }
        self.indptr.push(self.indices.len());
    }

    /// Append a row whose entries are `dense[j]` at columns `col_offset + j`,
    /// followed by extra sparse entries.
    pub fn push_row_dense_block(&mut self, col_offset: usize, dense: &[f64], extra: &[(usize, f64)]) {
        for (j, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                self.indices.push(col_offset + j);
                self.values.push(v);
            }
        }
        for &(c, v) in extra {
            debug_assert!(c < self.ncols);
            if v != 0.0 {
                self.indices.push(c);
                self.values.push(v);
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn build(self) -> CsrMatrix {
        CsrMatrix {
            nrows: self.indptr.len() - 1,
            ncols: self.ncols,
            indptr: self.indptr,
            indices: self.indices,
            values: self.values,
        }
    }
}

impl CsrMatrix {
    pub fn empty(ncols: usize) -> Self {
        CsrBuilder::new(ncols).build()
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `y += alpha * Aᵀ x`.
    pub fn add_tr_matvec(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for r in 0..self.nrows {
            let xr = alpha * x[r];
            if xr == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * xr;
            }
        }
    }

    /// Sparse dot of row `r` with a dense vector.
    #[inline]
    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(r);
        let mut acc = 0.0;
        for (&c, &v) in cols.iter().zip(vals) {
            acc += v * x[c];
        }
        acc
    }
}

/// Symmetric positive definite matrix in skyline (row profile) storage.
///
/// Row `i` stores columns `first[i]..=i`; the Cholesky factor has the same
/// profile, so a banded system stays banded and a dense one degrades to a
/// plain dense factorization.
pub struct SkylineMatrix {
    n: usize,
    first: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<f64>,
    /// Jacobi scales applied before factorization (empty until factored).
    scale: Vec<f64>,
}

impl SkylineMatrix {
    /// `first[i]` is the first column stored for row `i` (must be ≤ i).
    pub fn new(first: Vec<usize>) -> Self {
        let n = first.len();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            total += i - f + 1;
            offsets.push(total);
        }
        SkylineMatrix {
            n,
            first,
            offsets,
            data: vec![0.0; total],
            scale: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn first(&self, i: usize) -> usize {
        self.first[i]
    }

    pub fn reset(&mut self) {
        self.data.fill(0.0);
        self.scale.clear();
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Entry (i, j) for j within the stored profile of row i.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j >= self.first[i] && j <= i);
        let f = self.first[i];
        self.data[self.offsets[i] + (j - f)]
    }

    /// Set entry (i, j) with j within the stored profile of row i.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j >= self.first[i] && j <= i);
        let f = self.first[i];
        self.data[self.offsets[i] + (j - f)] = v;
    }

    #[inline]
    pub fn add_to_diag(&mut self, i: usize, v: f64) {
        let idx = self.offsets[i + 1] - 1;
        self.data[idx] += v;
    }

    /// Add `rel·(1 + |S_ii|)` to each diagonal entry; returns the increments.
    pub fn regularize_diag_relative(&mut self, rel: f64) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let idx = self.offsets[i + 1] - 1;
                let bump = rel * (1.0 + self.data[idx].abs());
                self.data[idx] += bump;
                bump
            })
            .collect()
    }

    /// Disjoint mutable row slices, for filling rows in parallel.
    /// Each entry is `(row, first_col, storage)`.
    pub fn rows_mut_partitioned(&mut self) -> Vec<(usize, usize, &mut [f64])> {
        let mut out = Vec::with_capacity(self.n);
        let mut rest: &mut [f64] = &mut self.data;
        for i in 0..self.n {
            let len = self.offsets[i + 1] - self.offsets[i];
            let (head, tail) = rest.split_at_mut(len);
            out.push((i, self.first[i], head));
            rest = tail;
        }
        out
    }

    /// In-place Cholesky `self = L Lᵀ` after Jacobi equilibration.
    /// Fails on a non-positive pivot.
    pub fn cholesky_in_place(&mut self) -> Result<(), FactorError> {
        // Equilibrate to unit diagonal.
        let mut scale = vec![1.0; self.n];
        for i in 0..self.n {
            let d = self.data[self.offsets[i + 1] - 1];
            if !(d > 0.0) || !d.is_finite() {
                return Err(FactorError::NotPositiveDefinite { row: i, pivot: d });
            }
            scale[i] = 1.0 / d.sqrt();
        }
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &mut self.data[self.offsets[i]..self.offsets[i + 1]];
            for (off, v) in row.iter_mut().enumerate() {
                *v *= scale[i] * scale[fi + off];
            }
        }
        self.scale = scale;
        for i in 0..self.n {
            let fi = self.first[i];
            // Split borrows: rows before i are read-only while row i mutates.
            let (prev, cur) = self.data.split_at_mut(self.offsets[i]);
            let row_i = &mut cur[..self.offsets[i + 1] - self.offsets[i]];
            for j in fi..i {
                let fj = self.first[j];
                let row_j = &prev[self.offsets[j] - self.offsets[0]..self.offsets[j + 1]];
                let lo = fi.max(fj);
                let s = dot(
                    &row_i[(lo - fi)..(j - fi)],
                    &row_j[(lo - fj)..(j - fj)],
                );
                let djj = row_j[j - fj];
                row_i[j - fi] = (row_i[j - fi] - s) / djj;
            }
            let s = dot(&row_i[..i - fi], &row_i[..i - fi]);
            let pivot = row_i[i - fi] - s;
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(FactorError::NotPositiveDefinite { row: i, pivot });
            }
            row_i[i - fi] = pivot.sqrt();
        }
        Ok(())
    }

    /// Solve `L Lᵀ x = b` in place after `cholesky_in_place`.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        debug_assert_eq!(self.scale.len(), self.n);
        for (v, s) in b.iter_mut().zip(&self.scale) {
            *v *= s;
        }
        // Forward: L y = b.
        for i in 0..self.n {
            let fi = self.first[i];
            let row = self.row(i);
            let s = row[..i - fi]
                .iter()
                .zip(&b[fi..i])
                .map(|(l, y)| l * y)
                .sum::<f64>();
            b[i] = (b[i] - s) / row[i - fi];
        }
        // Backward: Lᵀ x = y.
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            let xi = b[i] / row[i - fi];
            b[i] = xi;
            for (l, y) in row[..i - fi].iter().zip(&mut b[fi..i]) {
                *y -= l * xi;
            }
        }
        for (v, s) in b.iter_mut().zip(&self.scale) {
            *v *= s;
        }
    }
}

/// Small dense symmetric factorization used for component blocks.
///
/// Jacobi-equilibrated Cholesky: the matrix is scaled to unit diagonal
/// before factoring, which keeps pivots meaningful when diagonal entries
/// span many orders of magnitude (barrier weights against tiny ridges).
#[derive(Clone)]
pub struct DenseChol {
    n: usize,
    l: Vec<f64>,
    scale: Vec<f64>,
}

impl DenseChol {
    /// Factor a dense symmetric matrix given in full row-major storage.
    pub fn factor(n: usize, a: &[f64]) -> Result<Self, FactorError> {
        debug_assert_eq!(a.len(), n * n);
        let mut scale = vec![1.0; n];
        for i in 0..n {
            let d = a[i * n + i];
            if !(d > 0.0) || !d.is_finite() {
                return Err(FactorError::NotPositiveDefinite { row: i, pivot: d });
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j] * scale[i] * scale[j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(FactorError::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[i * n + j] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(DenseChol { n, l, scale })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            b[i] *= self.scale[i];
        }
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in 0..n {
            b[i] *= self.scale[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorError {
    NotPositiveDefinite { row: usize, pivot: f64 },
}

impl fmt::Display for FactorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorError::NotPositiveDefinite { row, pivot } => {
                write!(f, "non-positive pivot {pivot:e} at row {row}")
            }
        }
    }
}

impl std::error::Error for FactorError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skyline_dense_cholesky_solves() {
        // SPD matrix [[4,2,0],[2,5,1],[0,1,3]].
        let mut m = SkylineMatrix::new(vec![0, 0, 1]);
        m.set(0, 0, 4.0);
        m.set(1, 0, 2.0);
        m.set(1, 1, 5.0);
        m.set(2, 1, 1.0);
        m.set(2, 2, 3.0);
        m.cholesky_in_place().unwrap();
        let mut b = vec![2.0, 1.0, 4.0];
        m.solve_in_place(&mut b);
        // Residual check against the original matrix.
        let a = [[4.0, 2.0, 0.0], [2.0, 5.0, 1.0], [0.0, 1.0, 3.0]];
        for (i, row) in a.iter().enumerate() {
            let ax: f64 = row.iter().zip(&b).map(|(m, x)| m * x).sum();
            let rhs = [2.0, 1.0, 4.0][i];
            assert!((ax - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn skyline_rejects_indefinite() {
        let mut m = SkylineMatrix::new(vec![0, 0]);
        m.set(0, 0, 1.0);
        m.set(1, 0, 2.0);
        m.set(1, 1, 1.0); // [[1,2],[2,1]] has a negative eigenvalue
        assert!(m.cholesky_in_place().is_err());
    }

    #[test]
    fn dense_chol_roundtrip() {
        let a = [6.0, 2.0, 1.0, 2.0, 5.0, 2.0, 1.0, 2.0, 4.0];
        let ch = DenseChol::factor(3, &a).unwrap();
        let mut b = vec![1.0, -2.0, 3.0];
        ch.solve_in_place(&mut b);
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a[i * 3 + j] * b[j]).sum();
            let rhs = [1.0, -2.0, 3.0][i];
            assert!((ax - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn csr_matvec_and_transpose() {
        let mut b = CsrBuilder::new(3);
        b.push_row(&[(0, 1.0), (2, 2.0)]);
        b.push_row(&[(1, -1.0)]);
        let a = b.build();
        assert_eq!(a.matvec(&[1.0, 2.0, 3.0]), vec![7.0, -2.0]);
        let mut y = vec![0.0; 3];
        a.add_tr_matvec(1.0, &[1.0, 1.0], &mut y);
        assert_eq!(y, vec![1.0, -1.0, 2.0]);
    }
}
