//! Scalar element types.
//!
//! Training runs in `f32`; gradient checks switch to `f64`. Both route their
//! matrix products through `matrixmultiply`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `c = alpha * a·b + beta * c` for row/column-strided operands.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Strides are in elements.
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path) => {
        impl Real for $ty {
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
                if k > 0 {
                    assert!(max_offset(m, k, a_strides) < a.len(), "gemm: lhs out of bounds");
                    assert!(max_offset(k, n, b_strides) < b.len(), "gemm: rhs out of bounds");
                }
                assert!(max_offset(m, n, c_strides) < c.len(), "gemm: output out of bounds");
                // SAFETY: every element addressed by the strided views lies inside the
                // borrowed slices (checked above) and `c` is exclusively borrowed.
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

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
