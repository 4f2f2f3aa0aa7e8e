//! Small dense/sparse kernels shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::ops::Tally;

/// Row-compressed sparse matrix. Exact zeros are never stored.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    ncols: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl SparseRows {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut s = SparseRows { ncols: m.ncols(), ptr: vec![0], idx: vec![], val: vec![] };
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    s.idx.push(c);
                    s.val.push(v);
                }
            }
            s.ptr.push(s.idx.len());
        }
        s
    }

    /// Builds from per-row `(column, value)` lists; zero values are dropped.
    pub fn from_rows(ncols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut s = SparseRows { ncols, ptr: vec![0], idx: vec![], val: vec![] };
        for row in rows {
            for &(c, v) in row {
                debug_assert!(c < ncols);
                if v != 0.0 {
                    s.idx.push(c);
                    s.val.push(v);
                }
            }
            s.ptr.push(s.idx.len());
        }
        s
    }

    pub fn nrows(&self) -> usize {
        self.ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.ptr[r], self.ptr[r + 1]);
        self.idx[a..b].iter().copied().zip(self.val[a..b].iter().copied())
    }

    pub fn transpose(&self) -> SparseRows {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.ncols];
        for r in 0..self.nrows() {
            for (c, v) in self.row(r) {
                rows[c].push((r, v));
            }
        }
        SparseRows::from_rows(self.nrows(), &rows)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for r in 0..self.nrows() {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// `out[r] = Σ_c A[r,c] x[c] - offset[r]` (offset optional).
    pub fn mul_vec_into<T: Tally>(&self, x: &[f64], offset: Option<&[f64]>, out: &mut [f64], t: &mut T) {
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.ptr[r], self.ptr[r + 1]);
            let mut acc = 0.0;
            let mut muls = 0;
            for k in a..b {
                let v = self.val[k];
                let xv = x[self.idx[k]];
                if v == 1.0 {
                    acc += xv;
                } else if v == -1.0 {
                    acc -= xv;
                } else {
                    acc += v * xv;
                    muls += 1;
                }
            }
            let mut adds = (b - a).saturating_sub(1) as u64;
            if let Some(off) = offset {
                if off[r] != 0.0 {
                    acc -= off[r];
                    adds += 1;
                }
            }
            *o = acc;
            t.add(adds, muls);
        }
    }
}

/// `LDLᵀ` factorization of a symmetric positive definite matrix, stored
/// with only the structurally (and numerically) nonzero entries of `L`.
///
/// Factorizing in the natural order keeps all fill inside the envelope of
/// the input, so banded multistage systems stay banded.
#[derive(Debug, Clone)]
pub struct Ldl {
    n: usize,
    lower: SparseRows,
    upper: SparseRows,
    dinv: Vec<f64>,
}

impl Ldl {
    /// Returns `None` when a pivot is not positive relative to `pivot_tol`.
    pub fn factor(a: &DMatrix<f64>, pivot_tol: f64) -> Option<Ldl> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        // row-major dense workspace of L (strict lower) and d
        let mut l = vec![0.0; n * n];
        let mut d = vec![0.0; n];
        let mut first = vec![0usize; n];
        for i in 0..n {
            first[i] = (0..=i).find(|&j| a[(i, j)] != 0.0).unwrap_or(i);
        }
        for j in 0..n {
            let mut dj = a[(j, j)];
            for k in first[j]..j {
                let ljk = l[j * n + k];
                dj -= ljk * ljk * d[k];
            }
            if !(dj > pivot_tol * scale) {
                return None;
            }
            d[j] = dj;
            for i in j + 1..n {
                if first[i] > j {
                    continue;
                }
                let mut v = a[(i, j)];
                for k in first[i].max(first[j])..j {
                    v -= l[i * n + k] * l[j * n + k] * d[k];
                }
                l[i * n + j] = v / dj;
            }
        }
        let rows: Vec<Vec<(usize, f64)>> =
            (0..n).map(|i| (0..i).map(|j| (j, l[i * n + j])).collect()).collect();
        let lower = SparseRows::from_rows(n, &rows);
        let upper = lower.transpose();
        Some(Ldl { n, lower, upper, dinv: d.iter().map(|v| 1.0 / v).collect() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.lower.nnz()
    }

    /// Solves `L D Lᵀ x = b` in place.
    pub fn solve_in_place<T: Tally>(&self, b: &mut [f64], t: &mut T) {
        let n = self.n;
        for i in 0..n {
            let mut acc = b[i];
            let mut k = 0u64;
            for (j, v) in self.lower.row(i) {
                acc -= v * b[j];
                k += 1;
            }
            b[i] = acc;
            t.add(k, k);
        }
        for (bi, di) in b.iter_mut().zip(&self.dinv) {
            *bi *= di;
        }
        t.add(0, n as u64);
        for i in (0..n).rev() {
            let mut acc = b[i];
            let mut k = 0u64;
            for (j, v) in self.upper.row(i) {
                acc -= v * b[j];
                k += 1;
            }
            b[i] = acc;
            t.add(k, k);
        }
    }
}

/// Largest singular value based rank with relative threshold.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Orthonormal basis of the column range of `m`; singular values below
/// `rel_tol · σ_max` are treated as zero.
pub fn range_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let rows = m.nrows();
    if rows == 0 || m.ncols() == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(rows, 0);
    }
    let mut order: Vec<usize> = (0..sv.len()).filter(|&k| sv[k] > rel_tol * smax).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap().then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(rows, order.len());
    for (c, &k) in order.iter().enumerate() {
        // fix the sign so that the largest-magnitude entry is positive
        let col = u.column(k);
        let piv = col.iter().cloned().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let s = if piv < 0.0 { -1.0 } else { 1.0 };
        basis.set_column(c, &(col * s));
    }
    basis
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Builds a matrix from row-major nested vectors.
pub fn from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(ncols_if_empty);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}
