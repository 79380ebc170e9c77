//! Dense row-major kernels for the encoder forward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::config(format!(
                    "row {i} has length {}, expected {cols}",
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

    /// A 1×n matrix holding `v`.
    pub fn row_vector(v: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v,
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = T> + '_ {
        (0..self.rows).map(move |r| self.get(r, c))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::config(format!(
                    "gather row {r} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        })
    }

    /// Columns `start..end` of every row.
    pub fn column_slice(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols);
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::config(format!(
                "elementwise add of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "matmul inner dimension mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, p);
    for i in 0..m {
        let out_row = &mut out.data[i * p..(i + 1) * p];
        for t in 0..k {
            let a_it = a.data[i * k + t];
            let b_row = &b.data[t * p..(t + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_it * bv;
            }
        }
    }
    Ok(out)
}

/// `x · wᵀ + bias`, with `w` stored as `out × in` (the usual linear-layer layout).
pub fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, bias: Option<&[T]>) -> Result<Matrix<T>> {
    if x.cols != w.cols {
        return Err(Error::config(format!(
            "linear: input width {} does not match weight {:?}",
            x.cols,
            w.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.rows {
            return Err(Error::config(format!(
                "linear: bias length {} does not match output width {}",
                b.len(),
                w.rows
            )));
        }
    }
    let (m, k, p) = (x.rows, x.cols, w.rows);
    let mut out = Matrix::zeros(m, p);
    for i in 0..m {
        let x_row = x.row(i);
        for j in 0..p {
            let w_row = &w.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&a, &b) in x_row.iter().zip(w_row) {
                acc += a * b;
            }
            if let Some(b) = bias {
                acc += b[j];
            }
            out.data[i * p + j] = acc;
        }
    }
    Ok(out)
}

/// Adds `bias` to every row.
pub fn add_bias<T: Scalar>(m: &mut Matrix<T>, bias: &[T]) -> Result<()> {
    if bias.len() != m.cols {
        return Err(Error::config(format!(
            "bias length {} != {} columns",
            bias.len(),
            m.cols
        )));
    }
    for r in 0..m.rows {
        for (v, &b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Numerically stable softmax of a single row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    let mut out = x.to_vec();
    layer_norm_in_place(&mut out, gamma, beta, eps)?;
    Ok(out)
}

fn layer_norm_in_place<T: Scalar>(x: &mut [T], gamma: &[T], beta: &[T], eps: T) -> Result<()> {
    if x.is_empty() {
        return Err(Error::config("layer_norm of an empty vector"));
    }
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::config(format!(
            "layer_norm: lengths x={} gamma={} beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > T::zero()) {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    for ((v, &g), &b) in x.iter_mut().zip(gamma).zip(beta) {
        *v = (*v - mean) * inv * g + b;
    }
    Ok(())
}

/// Row-wise layer normalization.
pub fn layer_norm_rows<T: Scalar>(
    m: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for r in 0..out.rows {
        layer_norm_in_place(out.row_mut(r), gamma, beta, eps)?;
    }
    Ok(out)
}

/// Exact-erf GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}
