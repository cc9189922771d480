//! Floating-point element types the tensor code is generic over.
//!
//! Training runs in `f32` for throughput; the gradient analysis switches to
//! `f64` where finite-difference probes need the extra precision.

use std::fmt::Debug;

use num_traits::Float;

pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    const BYTES: usize;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row-major views.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`.
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

macro_rules! check_extent {
    ($buf:expr, $rows:expr, $cols:expr, $strides:expr) => {
        if $rows > 0 && $cols > 0 {
            let last = ($rows as isize - 1) * $strides.0 + ($cols as isize - 1) * $strides.1;
            assert!(
                $strides.0 >= 0 && $strides.1 >= 0 && (last as usize) < $buf.len(),
                "gemm operand out of bounds"
            );
        }
    };
}

macro_rules! impl_scalar {
    ($ty:ty, $bytes:expr, $kernel:path) => {
        impl Scalar for $ty {
            const BYTES: usize = $bytes;

            #[inline]
            fn of(x: f64) -> Self {
                x as $ty
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
                check_extent!(a, m, k, a_strides);
                check_extent!(b, k, n, b_strides);
                check_extent!(c, m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $kernel(
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

impl_scalar!(f32, 4, matrixmultiply::sgemm);
impl_scalar!(f64, 8, matrixmultiply::dgemm);
