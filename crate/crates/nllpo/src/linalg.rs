//! Dense linear algebra for small problems: row-major matrices, vectors,
//! and symmetric positive-definite matrices carried as Cholesky factors.
//!
//! Everything here targets dimensions in the tens; no attempt is made at
//! blocking, pivoting, or sparse storage.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric within tolerance {tol}")]
    NotSymmetric { tol: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Panics if the length is wrong or
    /// any entry is non-finite; both indicate a caller bug, not a data error.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        assert!(data.iter().all(|v| v.is_finite()), "non-finite matrix entry");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, v) in diag.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &Vector) -> Result<Vector, LinalgError> {
        if self.cols != v.dim() {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: v.dim() });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self.get(i, j) * v[j];
            }
            out[i] = acc;
        }
        Ok(Vector::new(out))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Sum of diagonal entries.
    pub fn trace(&self) -> Result<f64, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        Ok((0..self.rows).map(|i| self.get(i, i)).sum())
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Symmetry check relative to the largest entry magnitude.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// Cholesky factorization of a symmetric matrix. The input is symmetrized
    /// as (M + Mᵀ)/2 before factoring; a non-positive pivot is reported, not
    /// repaired.
    pub fn cholesky(&self) -> Result<SpdMatrix, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        if !self.is_symmetric(SYMMETRY_REL_TOL) {
            return Err(LinalgError::NotSymmetric { tol: SYMMETRY_REL_TOL });
        }
        let n = self.rows;
        let sym = |i: usize, j: usize| 0.5 * (self.get(i, j) + self.get(j, i));
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = sym(i, j);
                for k in 0..j {
                    acc -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if acc <= 0.0 {
                        return Err(LinalgError::NotPositiveDefinite { index: i, pivot: acc });
                    }
                    l.set(i, j, acc.sqrt());
                } else {
                    l.set(i, j, acc / l.get(j, j));
                }
            }
        }
        Ok(SpdMatrix { dim: n, factor: l })
    }
}

/// Symmetry tolerance applied before factorization; covariance estimates
/// accumulate floating-point asymmetry of roughly this size.
pub const SYMMETRY_REL_TOL: f64 = 1e-10;

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        assert!(data.iter().all(|v| v.is_finite()), "non-finite vector entry");
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector { data: self.data.iter().map(|v| v * s).collect() }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Symmetric positive-definite matrix, stored as its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    factor: Matrix,
}

impl SpdMatrix {
    pub fn identity(n: usize) -> Self {
        Self { dim: n, factor: Matrix::identity(n) }
    }

    /// Diagonal SPD matrix; panics on non-positive entries.
    pub fn from_diag(diag: &[f64]) -> Self {
        assert!(diag.iter().all(|v| *v > 0.0), "diagonal must be strictly positive");
        let sqrt: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
        Self { dim: diag.len(), factor: Matrix::from_diag(&sqrt) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The lower-triangular factor L with M = L·Lᵀ.
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    /// Reconstructs the dense matrix L·Lᵀ.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..=i.min(j) {
                    acc += self.factor.get(i, k) * self.factor.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Solves M x = b via the two triangular systems.
    pub fn solve(&self, b: &Vector) -> Result<Vector, LinalgError> {
        if b.dim() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: b.dim() });
        }
        let n = self.dim;
        let l = &self.factor;
        // forward: L y = b
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= l.get(i, k) * y[k];
            }
            y[i] = acc / l.get(i, i);
        }
        // backward: Lᵀ x = y
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= l.get(k, i) * x[k];
            }
            x[i] = acc / l.get(i, i);
        }
        Ok(Vector::new(x))
    }

    /// Dense inverse, refactored so the result is again a valid SpdMatrix.
    pub fn inverse(&self) -> Result<SpdMatrix, LinalgError> {
        let n = self.dim;
        let mut inv = Matrix::zeros(n, n);
        for j in 0..n {
            let mut e = Vector::zeros(n);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        inv.cholesky()
    }

    /// log det(M), computed from the factor diagonal as 2·Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| self.factor.get(i, i).ln()).sum::<f64>() * 2.0
    }

    /// Quadratic form dᵀ M d, evaluated as ‖Lᵀd‖² so it is exactly nonnegative.
    pub fn quadratic_form(&self, d: &Vector) -> Result<f64, LinalgError> {
        if d.dim() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: d.dim() });
        }
        let n = self.dim;
        let mut acc = 0.0;
        for j in 0..n {
            // (Lᵀ d)_j = Σ_i L_ij d_i, nonzero only for i ≥ j
            let mut s = 0.0;
            for i in j..n {
                s += self.factor.get(i, j) * d[i];
            }
            acc += s * s;
        }
        Ok(acc)
    }

    pub fn scale(&self, s: f64) -> SpdMatrix {
        assert!(s > 0.0, "scale factor must be positive");
        SpdMatrix { dim: self.dim, factor: self.factor.scale(s.sqrt()) }
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use crate::rng::RngStream;

    /// Random SPD matrix built as GᵀG + eps·I.
    pub fn random_spd(n: usize, rng: &mut RngStream, eps: f64) -> SpdMatrix {
        let g = Matrix::from_fn(n, n, |_, _| rng.normal());
        let mut m = g.transpose().matmul(&g).unwrap();
        for i in 0..n {
            m.set(i, i, m.get(i, i) + eps);
        }
        m.cholesky().unwrap()
    }

    /// Cofactor-expansion determinant, usable as an oracle for dims <= 4.
    pub fn det_cofactor(m: &Matrix) -> f64 {
        let n = m.rows();
        assert_eq!(n, m.cols());
        if n == 1 {
            return m.get(0, 0);
        }
        let mut det = 0.0;
        for j in 0..n {
            let minor = Matrix::from_fn(n - 1, n - 1, |r, c| {
                m.get(r + 1, if c < j { c } else { c + 1 })
            });
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * m.get(0, j) * det_cofactor(&minor);
        }
        det
    }
}
