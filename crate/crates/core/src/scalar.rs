//! Floating point element types the numeric core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Element type of tensors, parameters and optimizer state: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
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
    /// Lossy conversion from an `f64` constant.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row-major `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover every index
                // reachable through (m, k, n) and the given strides; the
                // checks below guard the common contiguous layouts.
                debug_assert!(c.len() >= (m - 1) * c_strides.0 as usize + (n - 1) * c_strides.1 as usize + 1);
                if k > 0 {
                    debug_assert!(a.len() >= (m - 1) * a_strides.0 as usize + (k - 1) * a_strides.1 as usize + 1);
                    debug_assert!(b.len() >= (k - 1) * b_strides.0 as usize + (n - 1) * b_strides.1 as usize + 1);
                }
                if m == 1 || n == 1 || m * k * n <= SMALL_GEMM {
                    gemm_direct(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, c_strides);
                    return;
                }
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

/// Below this many multiply-adds, or for vector shapes, packing costs more
/// than it saves.
const SMALL_GEMM: usize = 4096;

#[allow(clippy::too_many_arguments)]
fn gemm_direct<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (ars, acs): (isize, isize),
    b: &[T],
    (brs, bcs): (isize, isize),
    beta: T,
    c: &mut [T],
    (crs, ccs): (isize, isize),
) {
    for i in 0..m {
        let arow = &a[i * ars as usize..];
        for j in 0..n {
            let bcol = &b[j * bcs as usize..];
            let acc = if acs == 1 && brs == 1 {
                dot(&arow[..k], &bcol[..k])
            } else {
                let xs = arow.iter().step_by(acs as usize);
                let ys = bcol.iter().step_by(brs as usize);
                xs.zip(ys).take(k).fold(T::zero(), |s, (&x, &y)| s + x * y)
            };
            let ci = i * crs as usize + j * ccs as usize;
            c[ci] = if beta == T::zero() { alpha * acc } else { alpha * acc + beta * c[ci] };
        }
    }
}

/// Contiguous dot product with four independent accumulators.
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (p, q) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += p[l] * q[l];
        }
    }
    let mut tail = T::zero();
    for (&p, &q) in xr.iter().zip(yr) {
        tail += p * q;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
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
    fn gemm_matches_triple_loop() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for (x, y) in c.iter().zip(naive(2, 3, 4, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_f32_transposed_operand() {
        // a stored as 3x2, used transposed as 2x3
        let at = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &at, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }
}
