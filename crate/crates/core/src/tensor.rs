//! Dense row-major matrices and the handful of kernels the models need.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible
//! for a given build. Dot products use eight interleaved accumulators which
//! are summed pairwise at the end; matrix products are written in `i, p, j`
//! order so the inner loop is a contiguous axpy.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;

/// Floating point element type used by the models (`f32` for training and
/// evaluation, `f64` for gradient checks).
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Uniform in `±bound`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[T]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product with eight interleaved accumulators.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// `a (m×k) · b (k×n)`
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &ap) in arow.iter().enumerate() {
            if ap != T::zero() {
                axpy(ap, b.row(p), orow);
            }
        }
    }
    out
}

/// `a (m×k) · b (k×n) + bias (1×n)` broadcast over rows.
pub fn matmul_bias<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, bias: &Matrix<T>) -> Matrix<T> {
    assert_eq!(bias.len(), b.cols, "bias width");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        orow.copy_from_slice(&bias.data);
        for (p, &ap) in a.row(i).iter().enumerate() {
            if ap != T::zero() {
                axpy(ap, b.row(p), orow);
            }
        }
    }
    out
}

/// `a (m×n) · bᵀ` where `b` is `k×n`; result `m×k`.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for p in 0..b.rows {
            out.data[i * b.rows + p] = dot(arow, b.row(p));
        }
    }
    out
}

/// `acc (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn matmul_tn_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, acc: &mut Matrix<T>) {
    assert_eq!(a.rows, b.rows, "matmul_tn rows");
    assert_eq!(acc.shape(), (a.cols, b.cols), "matmul_tn acc shape");
    for i in 0..a.rows {
        let brow = b.row(i);
        for (p, &ap) in a.row(i).iter().enumerate() {
            if ap != T::zero() {
                axpy(ap, brow, acc.row_mut(p));
            }
        }
    }
}

/// Column sums of `a` accumulated into `acc` (1×n).
pub fn sum_rows_acc<T: Scalar>(a: &Matrix<T>, acc: &mut Matrix<T>) {
    assert_eq!(acc.len(), a.cols);
    for i in 0..a.rows {
        axpy(T::one(), a.row(i), &mut acc.data);
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}

/// `log(sum(exp(xs)))`, stable.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &x in xs {
        total = total + (x - max).exp();
    }
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
        let b = Matrix::<f64>::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![0.0, -1.0]]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![5.0, -1.0, 0.0, -1.5]);

        let mut bt = Matrix::zeros(2, 3);
        for i in 0..3 {
            for j in 0..2 {
                bt.set(j, i, b.get(i, j));
            }
        }
        assert_eq!(matmul_nt(&a, &bt).data, c.data);

        let mut acc = Matrix::zeros(3, 2);
        let mut at = Matrix::zeros(2, 3);
        at.data.copy_from_slice(&a.data);
        matmul_tn_acc(&Matrix::<f64>::identity(2), &c, &mut Matrix::zeros(2, 2));
        matmul_tn_acc(&at, &c, &mut acc);
        assert_eq!(acc.get(0, 0), 1.0 * 5.0 + -1.0 * 0.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = vec![1000.0f32, 999.0, -5.0];
        softmax_in_place(&mut xs);
        let s: f32 = xs.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
