//! Floating-point scalar abstraction shared by the tensor engine and the model.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar the tensor engine can compute with.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Short dtype tag used in diagnostics.
    const NAME: &'static str;

    /// `c <- alpha * a * b + beta * c` on row-major `m x k`, `k x n` and `m x n` blocks.
    ///
    /// Strides are in elements, so transposed operands can be passed by swapping them.
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

    #[inline]
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

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
                let span = |rows: usize, cols: usize, s: (isize, isize)| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * s.0 + (cols as isize - 1) * s.1 + 1
                    }
                };
                assert!(a.len() as isize >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() as isize >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() as isize >= span(m, n, c_strides), "gemm: out too short");
                // SAFETY: the assertions above bound every index the kernel touches.
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

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_lhs_via_strides() {
        // a^T where a is 3x2 stored row-major
        let a = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [1.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a, (1, 2), &b, (2, 1), 1.0, &mut c, (2, 1));
        assert_eq!(c, [59.0, 65.0, 140.0, 155.0]);
    }
}
