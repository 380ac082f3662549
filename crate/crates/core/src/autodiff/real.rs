use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the differentiation core.
///
/// Implemented for `f32` (training and inference) and `f64` (gradient
/// checks). The GEMM hook routes to the matching `matrixmultiply` kernel.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// (for `c`) memory regions of the stated dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

/// Row-major matrix product `op(A) * op(B)` where `op` optionally transposes.
///
/// `a` is stored as `a_rows x a_cols`, `b` as `b_rows x b_cols`. Returns the
/// product and its `(rows, cols)`.
pub fn matmul<T: Real>(
    a: &[T],
    (a_rows, a_cols): (usize, usize),
    ta: bool,
    b: &[T],
    (b_rows, b_cols): (usize, usize),
    tb: bool,
) -> (Vec<T>, usize, usize) {
    assert_eq!(a.len(), a_rows * a_cols, "matmul: lhs buffer size");
    assert_eq!(b.len(), b_rows * b_cols, "matmul: rhs buffer size");
    let (m, k, rsa, csa) = if ta {
        (a_cols, a_rows, 1isize, a_cols as isize)
    } else {
        (a_rows, a_cols, a_cols as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if tb {
        (b_cols, b_rows, 1isize, b_cols as isize)
    } else {
        (b_rows, b_cols, b_cols as isize, 1isize)
    };
    assert_eq!(k, k2, "matmul: inner dimensions differ ({k} vs {k2})");
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 {
        if k == 0 {
            return (out, m, n);
        }
        // SAFETY: buffer sizes asserted above; `out` is exclusively borrowed.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    (out, m, n)
}
