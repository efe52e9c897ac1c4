//! Dense and sparse linear-algebra primitives shared by the rest of the crate.
//!
//! The matrix exponential is nalgebra's scaling and squaring with guards
//! for non-finite input and overflow. The sparse type wraps the CSR store
//! of nalgebra-sparse and adds the row-vector products `v·B` that drive
//! transient solves.

use nalgebra::{DMatrix, DVector, RowDVector};
use nalgebra_sparse::CooMatrix;

use crate::error::{Error, Result};

/// 1-norm (maximum absolute column sum).
pub fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Infinity norm (maximum absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^{M x}` for a square matrix `M` and finite scalar `x`.
pub fn mexp(m: &DMatrix<f64>, x: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::NonSquareMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if !x.is_finite() {
        return Err(Error::Overflow("non-finite time argument".into()));
    }
    let a = m * x;
    expm(&a)
}

/// `e^{A}` by scaling and squaring.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow("non-finite matrix entry".into()));
    }
    let norm = norm1(a);
    if norm == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let result = a.clone().exp();
    if result.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow(format!(
            "matrix exponential exceeds f64 range (1-norm of argument {norm:.3e})"
        )));
    }
    Ok(result)
}

/// Ones column vector of length `n`.
pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

/// Unit row vector `e_i` of length `n`.
pub fn unit_row(n: usize, i: usize) -> RowDVector<f64> {
    let mut v = RowDVector::zeros(n);
    v[i] = 1.0;
    v
}

/// 2-norm condition number via singular values; `inf` when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Certified test that the spectral radius of `m` is below one: some
/// repeated square `m^(2^k)` has infinity norm below one.
pub fn spectral_radius_below_one(m: &DMatrix<f64>) -> bool {
    let mut pow = m.clone();
    for _ in 0..48 {
        let nrm = norm_inf(&pow);
        if nrm < 1.0 {
            return true;
        }
        if !nrm.is_finite() || nrm > 1e150 {
            return false;
        }
        pow = &pow * &pow;
    }
    false
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    inner: nalgebra_sparse::CsrMatrix<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: Vec<(usize, usize, f64)>) -> Self {
        let mut coo = CooMatrix::new(nrows, ncols);
        for (r, c, v) in triplets {
            coo.push(r, c, v);
        }
        let inner = nalgebra_sparse::CsrMatrix::from(&coo).filter(|_, _, v| *v != 0.0);
        CsrMatrix { inner }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let inner = nalgebra_sparse::CsrMatrix::from(m);
        CsrMatrix { inner }
    }

    pub fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    /// Iterator over `(col, value)` of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (offsets, cols, vals) = self.inner.csr_data();
        let (a, b) = (offsets[i], offsets[i + 1]);
        cols[a..b].iter().copied().zip(vals[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(c, _)| *c == j).map(|(_, v)| v).unwrap_or(0.0)
    }

    /// `y = M x` for a column vector.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols());
        let y = &self.inner * DVector::from_column_slice(x);
        y.as_slice().to_vec()
    }

    /// `y = v M` for a row vector, written into `out`.
    pub fn vec_mul_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.nrows());
        assert_eq!(out.len(), self.ncols());
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (c, val) in self.row(i) {
                out[c] += vi * val;
            }
        }
    }

    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols()];
        self.vec_mul_into(v, &mut out);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from(&self.inner)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows().min(self.ncols())).map(|i| self.get(i, i)).collect()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows())
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Row sums `M e`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }
}
