//! Dense linear-algebra kernels.
//!
//! Everything here is a plain function over row-major `f64` storage with a
//! fixed accumulation order, so identical inputs always give bit-identical
//! outputs. There is no internal parallelism.

mod cholesky;
mod elimination;
mod oracle;

use std::fmt;
use std::str::FromStr;

pub use cholesky::{cholesky, spd_solve, Cholesky};
pub use elimination::{gaussian_eliminate, EliminationResult, DEFAULT_PIVOT_TOL};
pub use oracle::min_norm_oracle;

/// Errors raised by the linear-algebra kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (asymmetry {asymmetry:e} exceeds {limit:e})")]
    NotSymmetric { asymmetry: f64, limit: f64 },
    #[error("matrix is not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("inconsistent system: dropped row has rhs residual {residual:e} (tolerance {tolerance:e})")]
    Inconsistent { residual: f64, tolerance: f64 },
    #[error("rows are linearly dependent (row {row} has no independent component)")]
    RankDeficient { row: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed matrix text at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense matrix of `f64` in row-major order. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DataLength {
                    rows: rows.len(),
                    cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Builds a matrix by evaluating `f(i, j)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw storage. Callers are responsible for keeping
    /// entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_cols(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, indices.len(), |i, j| self.get(i, indices[j]))
    }

    /// Largest absolute entry (`0` for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm_sq(self).sqrt()
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let m = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        m.check_finite()?;
        Ok(m)
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(k) => Err(LinalgError::NonFinite {
                row: k / self.cols.max(1),
                col: k % self.cols.max(1),
            }),
        }
    }

    /// Writes the text fixture format: a `rows cols` header, then one line of
    /// space-separated values per row at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|x| format_real(*x)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the format produced by [`Matrix::to_text`]. Trailing content
    /// after the declared rows is ignored.
    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut lines = text.lines().enumerate();
        let (rows, cols) = match lines.next() {
            Some((_, header)) => parse_header(header)?,
            None => {
                return Err(LinalgError::Parse {
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (idx, line) = lines.next().ok_or_else(|| LinalgError::Parse {
                line: r + 2,
                reason: format!("expected {rows} data rows, found {r}"),
            })?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v = f64::from_str(tok).map_err(|e| LinalgError::Parse {
                    line: idx + 1,
                    reason: format!("bad number {tok:?}: {e}"),
                })?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(LinalgError::Parse {
                    line: idx + 1,
                    reason: format!("expected {cols} values, found {}", data.len() - before),
                });
            }
        }
        Matrix::from_vec(rows, cols, data)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = header.split_whitespace().collect();
    let bad = |reason: String| LinalgError::Parse { line: 1, reason };
    if parts.len() != 2 {
        return Err(bad(format!("header must be `rows cols`, got {header:?}")));
    }
    let rows = parts[0]
        .parse()
        .map_err(|e| bad(format!("bad row count: {e}")))?;
    let cols = parts[1]
        .parse()
        .map_err(|e| bad(format!("bad column count: {e}")))?;
    Ok((rows, cols))
}

/// Formats a real at 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// `a * b`. Each output entry accumulates `a[i,k] * b[k,j]` for ascending `k`
/// starting from zero, exactly like the textbook triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = &mut c.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
    c.check_finite()?;
    Ok(c)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LinalgError::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let b_row = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            let c_row = &mut c.data[i * n..(i + 1) * n];
            for (cij, &brj) in c_row.iter_mut().zip(b_row) {
                *cij += ari * brj;
            }
        }
    }
    c.check_finite()?;
    Ok(c)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LinalgError::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            c.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    c.check_finite()?;
    Ok(c)
}

/// Sequential dot product.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |s, (a, b)| s + a * b)
}

/// Squared Frobenius norm, summed in storage order.
pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    m.data.iter().fold(0.0, |s, x| s + x * x)
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }
}
