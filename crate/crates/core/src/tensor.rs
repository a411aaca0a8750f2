//! Dense NHWC feature tensors and the scalar abstraction shared by the
//! network, losses and optimizer.
//!
//! Everything runs in `f32` for training and inference; `f64` is used by the
//! gradient checks, so numeric code is generic over [`Real`].

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The strides must describe matrices that lie inside the provided slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), `out` row-major.
pub(crate) fn matmul<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "matmul inner dimensions");
    assert!(out.len() >= m * n, "matmul output too small");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes and slice lengths were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// N×H×W×C activation block, channels fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor {
            n,
            h,
            w,
            c,
            data: vec![T::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::shape("tensor data", n * h * w * c, data.len()));
        }
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Validation(format!(
                "tensor dimensions must be positive, got {n}x{h}x{w}x{c}"
            )));
        }
        Ok(Tensor { n, h, w, c, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, c: usize, v: T) -> Self {
        Tensor {
            n,
            h,
            w,
            c,
            data: vec![v; n * h * w * c],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.n, self.h, self.w, self.c)
    }

    /// Elements of one batch item.
    pub fn item_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn item(&self, i: usize) -> &[T] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, y: usize, x: usize, c: usize) -> &mut T {
        &mut self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Single-item tensor holding item `i`.
    pub fn select(&self, i: usize) -> Tensor<T> {
        Tensor {
            n: 1,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.item(i).to_vec(),
        }
    }

    /// Stacks same-shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Validation("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in items {
            if (t.h, t.w, t.c) != (first.h, first.w, first.c) {
                return Err(Error::shape(
                    "stack",
                    (first.h, first.w, first.c),
                    (t.h, t.w, t.c),
                ));
            }
            n += t.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            n,
            h: first.h,
            w: first.w,
            c: first.c,
            data,
        })
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 4x2
        let expected = naive(&a, 3, 4, &b, 2);
        let mut out = vec![0.0; 6];
        matmul(Mat::new(&a, 3, 4), Mat::new(&b, 4, 2), &mut out, false);
        for (x, y) in out.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T stored as 4x3, b^T stored as 2x4
        let at: Vec<f64> = (0..12).map(|i| a[(i % 3) * 4 + i / 3]).collect();
        let bt: Vec<f64> = (0..8).map(|i| b[(i % 4) * 2 + i / 4]).collect();
        matmul(
            Mat::new(&at, 4, 3).t(),
            Mat::new(&bt, 2, 4).t(),
            &mut out,
            false,
        );
        for (x, y) in out.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        matmul(Mat::new(&a, 3, 4), Mat::new(&b, 4, 2), &mut out, true);
        for (x, y) in out.iter().zip(&expected) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_rejects_mismatched_items() {
        let a = Tensor::<f32>::zeros(1, 2, 2, 3);
        let b = Tensor::<f32>::zeros(1, 2, 3, 3);
        assert!(Tensor::stack(&[a.clone(), a.clone()]).is_ok());
        assert!(Tensor::stack(&[a, b]).is_err());
    }
}
