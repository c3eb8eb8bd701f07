//! Dense real matrix utilities: SVD-based Moore–Penrose pseudoinverse,
//! numerical rank, and small linear solves.
//!
//! Rank and pseudoinverse are computed from the same SVD and cutoff, so the
//! two always agree on which singular values are treated as zero.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("invalid matrix input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
}

pub type Result<T> = std::result::Result<T, MatrixError>;

/// A dense, finite, non-empty real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    inner: DMatrix<f64>,
}

impl RealMatrix {
    /// Builds a matrix from row-major entries.
    pub fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        if rows * cols != entries.len() {
            return Err(MatrixError::DimensionMismatch {
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", entries.len()),
            });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(rows, cols, entries))
    }

    /// Builds a matrix from a list of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(MatrixError::InvalidInput("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_major(n, p, &flat)
    }

    /// Builds a matrix from a list of equally long columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let p = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(MatrixError::InvalidInput("ragged columns".into()));
        }
        let flat: Vec<f64> = columns.iter().flatten().copied().collect();
        Self::from_dmatrix(DMatrix::from_column_slice(n, p, &flat))
    }

    pub fn from_dmatrix(inner: DMatrix<f64>) -> Result<Self> {
        if inner.nrows() == 0 || inner.ncols() == 0 {
            return Err(MatrixError::InvalidInput(format!(
                "matrix must be non-empty, got {}x{}",
                inner.nrows(),
                inner.ncols()
            )));
        }
        if let Some(pos) = inner.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % inner.nrows(), pos / inner.nrows());
            return Err(MatrixError::InvalidInput(format!(
                "non-finite entry at ({r}, {c})"
            )));
        }
        Ok(Self { inner })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            inner: DMatrix::identity(n.max(1), n.max(1)),
        }
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::from_dmatrix(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.inner[(row, col)]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.inner.row(row).iter().copied().collect()
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.inner.column(col).iter().copied().collect()
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.inner.transpose().as_slice().to_vec()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_dmatrix(self) -> DMatrix<f64> {
        self.inner
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(MatrixError::InvalidInput("empty row selection".into()));
        }
        Ok(Self {
            inner: self.inner.select_rows(idx),
        })
    }

    pub fn select_columns(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(MatrixError::InvalidInput("empty column selection".into()));
        }
        Ok(Self {
            inner: self.inner.select_columns(idx),
        })
    }

    pub fn transpose(&self) -> Self {
        Self {
            inner: self.inner.transpose(),
        }
    }

    pub fn matmul(&self, other: &RealMatrix) -> Result<Self> {
        if self.cols() != other.rows() {
            return Err(MatrixError::DimensionMismatch {
                expected: format!("{} rows", self.cols()),
                got: format!("{} rows", other.rows()),
            });
        }
        Ok(Self {
            inner: &self.inner * &other.inner,
        })
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.inner)
    }
}

/// Default relative cutoff for singular values: `max(rows, cols) * eps`.
pub fn default_rel_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}

fn effective_tol(m: &DMatrix<f64>, rel_tol: f64) -> f64 {
    if rel_tol > 0.0 {
        rel_tol
    } else {
        default_rel_tol(m.nrows(), m.ncols())
    }
}

fn check_tol(rel_tol: f64) -> Result<()> {
    if !(rel_tol.is_finite() && rel_tol >= 0.0) {
        return Err(MatrixError::InvalidInput(format!(
            "rel_tol must be a finite non-negative number, got {rel_tol}"
        )));
    }
    Ok(())
}

/// Moore–Penrose pseudoinverse via full SVD. Singular values at or below
/// `rel_tol * sigma_max` are treated as zero; `rel_tol = 0` selects
/// [`default_rel_tol`].
pub fn pseudo_inverse(m: &RealMatrix, rel_tol: f64) -> Result<RealMatrix> {
    check_tol(rel_tol)?;
    Ok(RealMatrix {
        inner: pinv_dense(&m.inner, rel_tol),
    })
}

/// Number of singular values strictly above `rel_tol * sigma_max`. Zero for
/// the zero matrix.
pub fn numerical_rank(m: &RealMatrix, rel_tol: f64) -> Result<usize> {
    check_tol(rel_tol)?;
    Ok(rank_dense(&m.inner, rel_tol))
}

/// Thin SVD `(U, σ, V)` computed by faer; nalgebra's SVD can return
/// factors that do not reconstruct exactly rank-deficient inputs.
fn thin_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let f = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    match f.thin_svd() {
        Ok(svd) => {
            let (u, v, s) = (svd.U(), svd.V(), svd.S());
            let r = u.ncols();
            (
                DMatrix::from_fn(rows, r, |i, j| u[(i, j)]),
                (0..r).map(|i| s[i]).collect(),
                DMatrix::from_fn(cols, r, |i, j| v[(i, j)]),
            )
        }
        Err(_) => {
            let svd = m.clone().svd(true, true);
            let v_t = svd.v_t.expect("v_t requested");
            (svd.u.expect("u requested"), svd.singular_values.as_slice().to_vec(), v_t.transpose())
        }
    }
}

/// Pseudoinverse on a raw nalgebra matrix. Callers guarantee finiteness.
pub(crate) fn pinv_dense(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let tol = effective_tol(m, rel_tol);
    let (u, sv, v) = thin_svd(m);
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    if sigma_max == 0.0 {
        return DMatrix::zeros(cols, rows);
    }
    let cutoff = tol * sigma_max;
    let mut out = DMatrix::zeros(cols, rows);
    for (idx, &s) in sv.iter().enumerate() {
        if s > cutoff {
            out += (v.column(idx) * u.column(idx).transpose()) / s;
        }
    }
    out
}

pub(crate) fn rank_dense(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0;
    }
    let tol = effective_tol(m, rel_tol);
    let (_, sv, _) = thin_svd(m);
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    if sigma_max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * sigma_max).count()
}

/// Solves the symmetric positive-definite system `a x = b` by Cholesky,
/// falling back to the pseudoinverse when the factorization fails.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => pinv_dense(a, 0.0) * b,
    }
}

pub(crate) fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
