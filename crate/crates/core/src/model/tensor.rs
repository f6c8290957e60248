//! Dense row-major arrays and the three matrix products the model needs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the model. Training runs in `f32`,
/// gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = a * b + beta * c` for an `m x k` by `k x n` product with explicit strides.
    ///
    /// # Safety
    /// Every strided index must stay inside the slices.
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

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
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

/// `out = x * w` with `x: rows x inner`, `w: inner x cols`.
pub fn matmul<T: Real>(x: &[T], w: &[T], out: &mut [T], rows: usize, inner: usize, cols: usize) {
    assert_eq!(x.len(), rows * inner);
    assert_eq!(w.len(), inner * cols);
    assert_eq!(out.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return;
    }
    if inner == 0 {
        out.fill(T::zero());
        return;
    }
    // SAFETY: lengths checked above match the row-major strides.
    unsafe {
        T::gemm_raw(
            rows,
            inner,
            cols,
            x.as_ptr(),
            inner as isize,
            1,
            w.as_ptr(),
            cols as isize,
            1,
            T::zero(),
            out.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// `dx += dy * w^T` with `dy: rows x cols`, `w: inner x cols`.
pub fn matmul_add_bt<T: Real>(dy: &[T], w: &[T], dx: &mut [T], rows: usize, inner: usize, cols: usize) {
    assert_eq!(dy.len(), rows * cols);
    assert_eq!(w.len(), inner * cols);
    assert_eq!(dx.len(), rows * inner);
    if rows == 0 || inner == 0 || cols == 0 {
        return;
    }
    // SAFETY: w^T is read through swapped strides of the checked w buffer.
    unsafe {
        T::gemm_raw(
            rows,
            cols,
            inner,
            dy.as_ptr(),
            cols as isize,
            1,
            w.as_ptr(),
            1,
            cols as isize,
            T::one(),
            dx.as_mut_ptr(),
            inner as isize,
            1,
        );
    }
}

/// `dw += x^T * dy` with `x: rows x inner`, `dy: rows x cols`.
pub fn matmul_add_at<T: Real>(x: &[T], dy: &[T], dw: &mut [T], rows: usize, inner: usize, cols: usize) {
    assert_eq!(x.len(), rows * inner);
    assert_eq!(dy.len(), rows * cols);
    assert_eq!(dw.len(), inner * cols);
    if rows == 0 || inner == 0 || cols == 0 {
        return;
    }
    // SAFETY: x^T is read through swapped strides of the checked x buffer.
    unsafe {
        T::gemm_raw(
            inner,
            rows,
            cols,
            x.as_ptr(),
            1,
            inner as isize,
            dy.as_ptr(),
            cols as isize,
            1,
            T::one(),
            dw.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// A named-shape array of model parameters (or their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }
}
