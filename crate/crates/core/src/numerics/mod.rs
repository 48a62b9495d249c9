//! Dense row-major linear algebra and seeded random numbers.
//!
//! Every routine uses a fixed loop nest so repeated calls on identical inputs
//! produce bit-identical results. All arithmetic is `f64`.

mod rng;

pub use rng::{derive_seed, Rng};

use crate::error::{Error, Result};

/// Dense 2-D array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{op}: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Frobenius inner product `Σ a_ij b_ij`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "inner: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Adds `value` to every diagonal entry of a square matrix.
    pub fn add_diagonal(&self, value: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m.data[i * self.cols + i] += value;
        }
        m
    }

    /// Copy with the columns selected (and ordered) by `cols`.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    /// Copy with rows and columns both permuted by `perm`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Self {
        Self::from_fn(perm.len(), perm.len(), |i, j| self.get(perm[i], perm[j]))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape(format!("vstack: {} columns vs {cols}", m.cols)));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Self { rows, cols, data })
    }
}

/// Standard product `a · b` with an i-k-j loop nest.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn: ({}x{})ᵀ times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let b_row = b.row(i);
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let out_row = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bij) in out_row.iter_mut().zip(b_row) {
                *o += aik * bij;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`; used for layer outputs `X Wᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

pub fn transpose(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.cols, m.rows, |i, j| m.get(j, i))
}

/// Squared Euclidean norm of every row.
pub fn row_norms_sq(m: &Matrix) -> Vec<f64> {
    (0..m.rows).map(|i| m.row(i).iter().map(|v| v * v).sum()).collect()
}

/// Squared Euclidean norm of every column.
pub fn col_norms_sq(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for i in 0..m.rows {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v * v;
        }
    }
    out
}

pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum()
}

/// Gram matrix `XᵀX/n`, the layer-level curvature surrogate.
pub fn gram_mean(x: &Matrix) -> Result<Matrix> {
    if x.rows == 0 {
        return Err(Error::Shape("gram of an empty matrix".into()));
    }
    Ok(matmul_tn(x, x)?.scale(1.0 / x.rows as f64))
}

/// Row-weighted Gram matrix `Xᵀ diag(w) X / n`.
pub fn weighted_gram_mean(x: &Matrix, weights: &[f64]) -> Result<Matrix> {
    if weights.len() != x.rows {
        return Err(Error::Shape(format!(
            "weighted gram: {} weights for {} rows",
            weights.len(),
            x.rows
        )));
    }
    if x.rows == 0 {
        return Err(Error::Shape("gram of an empty matrix".into()));
    }
    let d = x.cols;
    let mut out = Matrix::zeros(d, d);
    for (i, &w) in weights.iter().enumerate() {
        let r = x.row(i);
        for a in 0..d {
            let wa = w * r[a];
            let out_row = &mut out.data[a * d..(a + 1) * d];
            for (o, &rb) in out_row.iter_mut().zip(r) {
                *o += wa * rb;
            }
        }
    }
    Ok(out.scale(1.0 / x.rows as f64))
}

/// `tr(Δ H Δᵀ)`, the quadratic layer-reconstruction error of a weight delta.
pub fn quadratic_error(delta: &Matrix, h: &Matrix) -> Result<f64> {
    let dh = matmul(delta, h)?;
    dh.inner(delta)
}

/// Checks symmetry within `rel_tol` relative to the largest entry.
pub fn is_symmetric(h: &Matrix, rel_tol: f64) -> bool {
    if !h.is_square() {
        return false;
    }
    let tol = rel_tol * h.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..h.rows {
        for j in (i + 1)..h.cols {
            if (h.get(i, j) - h.get(j, i)).abs() > tol {
                return false;
            }
        }
    }
    true
}

const SYMMETRY_TOL: f64 = 1e-9;
const JITTER_ATTEMPTS: usize = 3;
// Pivots at or below this fraction of the largest diagonal entry count as a
// factorization failure.
const PIVOT_FLOOR: f64 = 1e-12;

/// Lower-triangular Cholesky factor together with the jitter that was added to
/// the diagonal (zero when the plain factorization succeeded).
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    pub lower: Matrix,
    pub jitter: f64,
}

impl Cholesky {
    /// Factors `h`, retrying with `jitter`, `10·jitter`, `100·jitter` added to
    /// the diagonal when the plain factorization fails.
    pub fn factor(h: &Matrix, jitter: f64) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::Shape(format!(
                "cholesky needs a square matrix, got {}x{}",
                h.rows, h.cols
            )));
        }
        if !is_symmetric(h, SYMMETRY_TOL) {
            return Err(Error::Shape("cholesky input is not symmetric".into()));
        }
        if !h.is_finite() {
            return Err(Error::Numerical("cholesky input has non-finite entries".into()));
        }
        if let Some(lower) = factor_plain(h) {
            return Ok(Self { lower, jitter: 0.0 });
        }
        let mut current = jitter;
        let mut last = jitter;
        for _ in 0..JITTER_ATTEMPTS {
            last = current;
            if current > 0.0 {
                if let Some(lower) = factor_plain(&h.add_diagonal(current)) {
                    return Ok(Self { lower, jitter: current });
                }
            }
            current *= 10.0;
        }
        Err(Error::Numerical(format!(
            "matrix not positive definite after jitter escalation (final jitter {last:e})"
        )))
    }

    /// Solves `(H + jitter·I) X = B` by forward and back substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.lower.rows;
        if b.rows != n {
            return Err(Error::Shape(format!(
                "solve: factor is {n}x{n}, rhs has {} rows",
                b.rows
            )));
        }
        let l = &self.lower;
        let mut x = b.clone();
        for c in 0..b.cols {
            for i in 0..n {
                let mut s = x.get(i, c);
                for k in 0..i {
                    s -= l.get(i, k) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for k in (i + 1)..n {
                    s -= l.get(k, i) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        self.solve(&Matrix::identity(self.lower.rows))
    }
}

fn factor_plain(h: &Matrix) -> Option<Matrix> {
    let n = h.rows;
    let max_diag = h.diagonal().into_iter().fold(0.0f64, f64::max);
    let floor = PIVOT_FLOOR * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !d.is_finite() || d <= floor {
            return None;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = h.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Some(l)
}

/// Lower-triangular factor `L` with `L Lᵀ = h + jitter·I` (jitter only on failure).
pub fn cholesky(h: &Matrix, jitter: f64) -> Result<Matrix> {
    Cholesky::factor(h, jitter).map(|c| c.lower)
}

/// Solves `h x = b` for symmetric positive definite `h`.
pub fn solve_spd(h: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(h, 0.0)?.solve(b)
}
