//! Small dense row-major matrix kernel.
//!
//! Everything the projection model needs: products (backed by
//! `matrixmultiply`), Gram matrices, Frobenius norms, Cholesky-based SPD
//! solves and cosine similarity. All arithmetic is `f64`.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Relative asymmetry tolerated by [`spd_solve`].
pub const SYMMETRY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("vector norm is below {ZERO_NORM:e}")]
    ZeroVector,
    #[error("non-finite entry at flat index {0}")]
    NonFinite(usize),
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from external data, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in code and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies rows `range` into a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack<'a, I>(cols: usize, parts: I) -> Result<Matrix, TensorError>
    where
        I: IntoIterator<Item = &'a Matrix>,
    {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::ShapeMismatch(format!(
                    "vstack of {} columns onto {}",
                    p.cols, cols
                )));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            1.0,
            MatRef::new(self),
            MatRef::new(other),
            0.0,
            &mut out,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn tmatmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::ShapeMismatch(format!(
                "({}x{})ᵀ times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, MatRef::new(self).t(), MatRef::new(other), 0.0, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch(format!(
                "{}x{} times ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, MatRef::new(self), MatRef::new(other).t(), 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ · self`, symmetrised exactly.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        gemm(1.0, MatRef::new(self).t(), MatRef::new(self), 0.0, &mut g);
        g.symmetrize();
        g
    }

    /// `self · selfᵀ`, symmetrised exactly.
    pub fn outer_gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.rows, self.rows);
        gemm(1.0, MatRef::new(self), MatRef::new(self).t(), 0.0, &mut g);
        g.symmetrize();
        g
    }

    /// Replaces the matrix by `(A + Aᵀ)/2`. Square matrices only.
    pub fn symmetrize(&mut self) {
        debug_assert_eq!(self.rows, self.cols);
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn add_diag(&mut self, value: f64) {
        debug_assert_eq!(self.rows, self.cols);
        let n = self.rows;
        for i in 0..n {
            self.data[i * n + i] += value;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(factor);
        m
    }

    /// `self += factor · other`.
    pub fn axpy(&mut self, factor: f64, other: &Matrix) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "axpy of {:?} into {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn frob_dot(&self, other: &Matrix) -> Result<f64, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "inner product of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn relative_asymmetry(&self) -> f64 {
        let n = self.rows;
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.data[i * n + j] - self.data[j * n + i]).abs());
            }
        }
        worst / scale
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Strided read-only view used to feed `dgemm`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(m: &'a Matrix) -> Self {
        MatRef { data: &m.data, rows: m.rows, cols: m.cols, rs: m.cols as isize, cs: 1 }
    }

    /// View of a contiguous row-major buffer.
    pub(crate) fn from_slice(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        MatRef { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub(crate) fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `out = alpha · a · b + beta · out`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut Matrix) {
    gemm_into(alpha, a, b, beta, &mut out.data, out.rows, out.cols);
}

pub(crate) fn gemm_into(
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    out: &mut [f64],
    out_rows: usize,
    out_cols: usize,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (out_rows, out_cols), "output shape");
    assert_eq!(out.len(), out_rows * out_cols);
    if out_rows == 0 || out_cols == 0 {
        return;
    }
    if a.cols == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views cover their buffers (checked at construction) and
    // the output buffer has exactly out_rows * out_cols elements.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            out_cols as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators; fixed order keeps results reproducible
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Sum of squared entries.
pub fn frobenius_sq(a: &Matrix) -> f64 {
    dot(&a.data, &a.data)
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64, TensorError> {
    if u.len() != v.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Err(TensorError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scales `v` to unit L2 norm in place.
pub fn normalize_in_place(v: &mut [f64]) -> Result<(), TensorError> {
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(TensorError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self, TensorError> {
        let (n, m) = a.shape();
        if n != m {
            return Err(TensorError::ShapeMismatch(format!("cholesky of {n}x{m}")));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let lj = &l.data[j * n..j * n + j];
            let pivot = a.data[j * n + j] - dot(lj, lj);
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(TensorError::NotPositiveDefinite { index: j, pivot });
            }
            let d = pivot.sqrt();
            l.data[j * n + j] = d;
            for i in (j + 1)..n {
                let s = a.data[i * n + j] - dot(&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
                l.data[i * n + j] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn factor_matrix(&self) -> &Matrix {
        &self.l
    }

    /// Solves `A X = B` for `X`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix, TensorError> {
        let mut x = b.clone();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }

    /// Overwrites `B` with `A⁻¹ B`.
    pub fn solve_in_place(&self, b: &mut Matrix) -> Result<(), TensorError> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(TensorError::ShapeMismatch(format!(
                "solve of {n}x{n} system with {}x{} right-hand side",
                b.rows, b.cols
            )));
        }
        let m = b.cols;
        let l = &self.l.data;
        // forward: L Y = B, row-oriented so the inner loop runs over contiguous RHS rows
        for i in 0..n {
            for k in 0..i {
                let lik = l[i * n + k];
                if lik != 0.0 {
                    let (head, tail) = b.data.split_at_mut(i * m);
                    let src = &head[k * m..(k + 1) * m];
                    for (t, s) in tail[..m].iter_mut().zip(src) {
                        *t -= lik * s;
                    }
                }
            }
            let inv = 1.0 / l[i * n + i];
            b.data[i * m..(i + 1) * m].iter_mut().for_each(|v| *v *= inv);
        }
        // backward: Lᵀ X = Y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = l[k * n + i];
                if lki != 0.0 {
                    let (head, tail) = b.data.split_at_mut(k * m);
                    let dst = &mut head[i * m..(i + 1) * m];
                    for (t, s) in dst.iter_mut().zip(&tail[..m]) {
                        *t -= lki * s;
                    }
                }
            }
            let inv = 1.0 / l[i * n + i];
            b.data[i * m..(i + 1) * m].iter_mut().for_each(|v| *v *= inv);
        }
        Ok(())
    }
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.rows() == 0 || a.rows() != a.cols() {
        return Err(TensorError::ShapeMismatch(format!(
            "spd_solve needs a non-empty square matrix, got {:?}",
            a.shape()
        )));
    }
    let asym = a.relative_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(TensorError::NotSymmetric(asym));
    }
    Cholesky::factor(a)?.solve(b)
}
