//! Dense row-major matrices and the handful of decompositions the metric needs.
//!
//! Everything here is `f64`. Summation orders are fixed (row-major, ascending
//! index) so results do not depend on how callers schedule work.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Scale of the default ridge relative to the mean diagonal of the total covariance.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-4;

#[derive(Clone, PartialEq)]
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

impl Matrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::mismatch(
                "matrix data length",
                rows * cols,
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix".into(),
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from a generator. The generator must return finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::mismatch("matrix row length", cols, bad.len()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::mismatch(
                "matmul inner dimension",
                self.cols,
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::mismatch("matvec length", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`; shapes must match.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_inner(self).sqrt()
    }

    /// Frobenius inner product `Σ a_ij b_ij`.
    pub fn frobenius_inner(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frobenius_inner shape mismatch");
        dot(&self.data, &other.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Replaces the matrix with `(S + Sᵀ)/2`; the result is exactly symmetric.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Total and between-class covariance of one feature set, plus the ridge used with them.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub total: Matrix,
    pub between: Matrix,
    pub ridge_applied: f64,
}

/// Column means of an `N×h` sample matrix.
pub fn column_means(samples: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; samples.cols()];
    for r in 0..samples.rows() {
        for (m, v) in mean.iter_mut().zip(samples.row(r)) {
            *m += v;
        }
    }
    let n = samples.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Population covariance `(1/N) Σ (x_n − x̄)(x_n − x̄)ᵀ` of the rows of `samples`.
pub fn covariance(samples: &Matrix) -> Result<Matrix> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let h = samples.cols();
    let mean = column_means(samples);
    let mut cov = Matrix::zeros(h, h);
    let mut centered = vec![0.0; h];
    for r in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(samples.row(r)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..h {
            let ca = centered[a];
            for b in 0..=a {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for a in 0..h {
        for b in 0..=a {
            let v = cov[(a, b)] * inv_n;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Scale-adaptive ridge `1e-4 · tr(Σ)/h`.
pub fn default_ridge(total: &Matrix) -> f64 {
    DEFAULT_RIDGE_SCALE * total.trace() / total.rows().max(1) as f64
}

/// Lower Cholesky factor of `m + ridge·I`.
pub fn cholesky(m: &Matrix, ridge: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::mismatch(
            "cholesky input",
            "square matrix",
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + ridge;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                minor: j + 1,
                order: n,
            });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the lower factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// `(m + ridge·I)⁻¹` through a Cholesky factorization. `m` must be symmetric.
pub fn ridge_cholesky_inverse(m: &Matrix, ridge: f64) -> Result<Matrix> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let l = cholesky(m, ridge)?;
    let n = l.rows();
    // L⁻¹ is lower triangular; forward substitution column by column.
    let mut linv = Matrix::zeros(n, n);
    for c in 0..n {
        linv[(c, c)] = 1.0 / l[(c, c)];
        for i in c + 1..n {
            let mut s = 0.0;
            for k in c..i {
                s -= l[(i, k)] * linv[(k, c)];
            }
            linv[(i, c)] = s / l[(i, i)];
        }
    }
    // (L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[(k, i)] * linv[(k, j)];
            }
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    Ok(inv)
}

/// `tr(a·b) = Σ_ij a_ij b_ji` without forming the product.
///
/// Diagonal terms first, then each off-diagonal pair `a_ij b_ji + a_ji b_ij`
/// in row-major order over the upper triangle. Swapping the arguments visits
/// the same pairs in the same order, so the result is exactly symmetric in
/// `(a, b)`.
pub fn trace_of_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    if !a.is_square() || a.shape() != b.shape() {
        return Err(Error::mismatch(
            "trace_of_product operands",
            format!("square {}x{}", a.rows(), a.rows()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        s += a[(i, i)] * b[(i, i)];
    }
    for i in 0..n {
        for j in i + 1..n {
            s += a[(i, j)] * b[(j, i)] + a[(j, i)] * b[(i, j)];
        }
    }
    Ok(s)
}
