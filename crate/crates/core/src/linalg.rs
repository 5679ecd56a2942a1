//! Dense row-major matrices and the handful of factorizations the rest of
//! the crate needs. Everything is `f64` with a fixed loop order, so results
//! are reproducible bit for bit.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Matrix {
    /// Checked constructor: the buffer must be `rows * cols` finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        check_finite("Matrix::new", &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Unchecked-finiteness constructor for internal use; the length is
    /// still asserted.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// A `n x 1` column from a slice.
    pub fn column_vector(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        check_finite(op, &self.data)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(Matrix::from_vec(n, m, out))
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?}ᵀ x {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for k in 0..self.rows {
            let a_row = &self.data[k * self.cols..(k + 1) * self.cols];
            let b_row = &other.data[k * m..(k + 1) * m];
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("t_matmul", &out)?;
        Ok(Matrix::from_vec(n, m, out))
    }

    /// `self * otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let (n, m, kk) = (self.rows, other.rows, self.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * kk..(i + 1) * kk];
            for j in 0..m {
                let b_row = &other.data[j * kk..(j + 1) * kk];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        check_finite("matmul_t", &out)?;
        Ok(Matrix::from_vec(n, m, out))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self − other‖_F / ‖other‖_F`, with the denominator floored at
    /// `f64::MIN_POSITIVE` so two zero matrices compare as equal.
    pub fn rel_error(&self, reference: &Matrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        Ok(diff / reference.frobenius_norm().max(f64::MIN_POSITIVE))
    }

    pub fn count_nonzero(&self, threshold: f64) -> usize {
        self.data.iter().filter(|v| v.abs() > threshold).count()
    }

    pub fn select_columns(&self, idx: &[usize]) -> Result<Matrix> {
        if let Some(bad) = idx.iter().find(|&&c| c >= self.cols) {
            return Err(Error::shape(
                "select_columns",
                format!("column {bad} of {}", self.cols),
            ));
        }
        Ok(Matrix::from_fn(self.rows, idx.len(), |r, j| self[(r, idx[j])]))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        if let Some(bad) = idx.iter().find(|&&r| r >= self.rows) {
            return Err(Error::shape("select_rows", format!("row {bad} of {}", self.rows)));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Ok(Matrix::from_vec(idx.len(), self.cols, data))
    }

    /// Rows `start..start + count`.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Matrix> {
        if start + count > self.rows {
            return Err(Error::shape(
                "row_block",
                format!("rows {start}..{} of {}", start + count, self.rows),
            ));
        }
        Ok(Matrix::from_vec(
            count,
            self.cols,
            self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        ))
    }

    /// Horizontal concatenation `[a, b, ...]`.
    pub fn hcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::shape("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    /// Vertical concatenation (stacking).
    pub fn vcat(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vcat", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    /// `self + c` entrywise.
    pub fn shift(&self, c: f64) -> Matrix {
        self.map(|v| v + c)
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn symmetric_part(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| 0.5 * (self[(r, c)] + self[(c, r)]))
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Column-wise softmax with max subtraction. Columns of exactly equal
/// entries map to an exactly uniform column.
pub fn softmax_columns(g: &Matrix) -> Result<Matrix> {
    g.ensure_finite("softmax_columns")?;
    let (rows, cols) = g.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut buf = vec![0.0; rows];
    for c in 0..cols {
        let max = (0..rows).fold(f64::NEG_INFINITY, |m, r| m.max(g[(r, c)]));
        let mut total = 0.0;
        for (r, b) in buf.iter_mut().enumerate() {
            *b = (g[(r, c)] - max).exp();
            total += *b;
        }
        for (r, b) in buf.iter().enumerate() {
            out[(r, c)] = b / total;
        }
    }
    Ok(out)
}

/// Softmax of a plain vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(values)`, stable for large magnitudes.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::shape("cholesky", format!("{:?} is not square", a.shape())));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite("cholesky"));
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Natural log of the determinant.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.lower.rows())
            .map(|i| self.lower[(i, i)].ln())
            .sum::<f64>()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.lower.rows();
        if b.rows() != n {
            return Err(Error::shape("cholesky_solve", format!("rhs has {} rows, need {n}", b.rows())));
        }
        let l = &self.lower;
        let mut x = b.clone();
        for c in 0..b.cols() {
            // forward: L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)];
            }
        }
        x.ensure_finite("cholesky_solve")?;
        Ok(x)
    }

    /// Solves `X A = B`, i.e. returns `B A⁻¹` (A symmetric).
    pub fn solve_right(&self, b: &Matrix) -> Result<Matrix> {
        Ok(self.solve(&b.transpose())?.transpose())
    }
}

/// Which Gram matrix [`logdet_gram_side`] factorizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramSide {
    /// `I + α Z Zᵀ` (rows × rows).
    Rows,
    /// `I + α Zᵀ Z` (cols × cols).
    Cols,
}

/// `log det(I + α ZᵀZ)`, factorizing whichever Gram side is smaller.
pub fn logdet_gram(z: &Matrix, alpha: f64) -> Result<f64> {
    let side = if z.rows() <= z.cols() {
        GramSide::Rows
    } else {
        GramSide::Cols
    };
    logdet_gram_side(z, alpha, side)
}

pub fn logdet_gram_side(z: &Matrix, alpha: f64, side: GramSide) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!("logdet_gram requires alpha > 0, got {alpha}")));
    }
    let gram = match side {
        GramSide::Rows => z.matmul_t(z)?,
        GramSide::Cols => z.t_matmul(z)?,
    };
    let mut m = gram.scale(alpha);
    for i in 0..m.rows() {
        m[(i, i)] += 1.0;
    }
    Ok(Cholesky::new(&m)?.logdet())
}

const ORTHO_RETRIES: usize = 4;

/// Gram–Schmidt with one re-orthogonalization pass per column.
///
/// A column that collapses numerically onto the previous ones is perturbed
/// with noise proportional to its own norm and retried; an exactly zero
/// column therefore stays rank deficient and is reported. Each output column
/// is sign-normalized so its first entry above 1e-12 in magnitude is positive.
pub fn orthonormalize(m: &Matrix, rng: &mut Rng) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Invalid(format!(
            "orthonormalize needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for c in 0..cols {
        let original = m.column(c);
        let scale = original.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut candidate = original.clone();
        let mut accepted = None;
        for _attempt in 0..=ORTHO_RETRIES {
            for _pass in 0..2 {
                for prev in &q {
                    let proj: f64 = prev.iter().zip(&candidate).map(|(a, b)| a * b).sum();
                    for (v, p) in candidate.iter_mut().zip(prev) {
                        *v -= proj * p;
                    }
                }
            }
            let norm = candidate.iter().map(|v| v * v).sum::<f64>().sqrt();
            if scale > 0.0 && norm > 1e-10 * scale {
                accepted = Some(candidate.iter().map(|v| v / norm).collect::<Vec<_>>());
                break;
            }
            candidate = original
                .iter()
                .map(|v| v + 1e-6 * scale * rng.normal())
                .collect();
        }
        let mut col = accepted.ok_or(Error::RankDeficient { column: c })?;
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
        }
        q.push(col);
    }
    let mut out = Matrix::zeros(rows, cols);
    for (c, col) in q.iter().enumerate() {
        out.set_column(c, col);
    }
    Ok(out)
}

/// A random `rows x cols` matrix with orthonormal columns.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    let g = rng.normal_matrix(rows, cols);
    orthonormalize(&g, rng)
}
