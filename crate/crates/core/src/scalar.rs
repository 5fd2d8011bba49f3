//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// f32 or f64, plus a strided GEMM kernel for the type.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c <- alpha * a·b + beta * c` over strided views.
    ///
    /// Each view is `(slice, offset, row_stride, col_stride)`; `a` is `m×k`,
    /// `b` is `k×n` and `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: View<'_, Self>,
        b: View<'_, Self>,
        beta: Self,
        c: ViewMut<'_, Self>,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

/// Mutable strided matrix view into a slice.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self { data, offset, row_stride, col_stride }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self { data, offset, row_stride, col_stride }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: View<'_, Self>,
                b: View<'_, Self>,
                beta: Self,
                c: ViewMut<'_, Self>,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.last_index(m, n) < c.data.len(), "gemm: c view out of bounds");
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            let idx = c.offset + i * c.row_stride + j * c.col_stride;
                            c.data[idx] *= beta;
                        }
                    }
                    return;
                }
                assert!(a.last_index(m, k) < a.data.len(), "gemm: a view out of bounds");
                assert!(b.last_index(k, n) < b.data.len(), "gemm: b view out of bounds");
                // SAFETY: every addressed element was bounds-checked above
                // (strides are non-negative so the last index is the maximum).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr().add(a.offset),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr().add(b.offset),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr().add(c.offset),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposed_views() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, View::new(&a, 0, k, 1), View::new(&b, 0, n, 1), 0.0, ViewMut::new(&mut c, 0, n, 1));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // bᵀ stored as n×k, read back through swapped strides
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, View::new(&a, 0, k, 1), View::new(&bt, 0, 1, k), 0.0, ViewMut::new(&mut c2, 0, n, 1));
        assert_eq!(c, c2);
    }

    #[test]
    fn zero_inner_dimension_scales_output() {
        let mut c = vec![2.0f32; 4];
        f32::gemm(2, 0, 2, 1.0, View::new(&[], 0, 0, 1), View::new(&[], 0, 2, 1), 0.5, ViewMut::new(&mut c, 0, 2, 1));
        assert_eq!(c, vec![1.0; 4]);
    }
}
