// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar abstraction so the same model code runs in 32-bit for training and
//! 64-bit for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Stored row-major as (rows x cols) when not transposed, (cols x rows) otherwise.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too small");
                assert!(b.len() >= k * n, "gemm: rhs too small");
                assert!(c.len() >= m * n, "gemm: output too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
