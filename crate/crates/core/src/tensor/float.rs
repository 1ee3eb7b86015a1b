//! Element types usable by the autodiff core.
//!
//! Training runs in `f32`; gradient verification runs the exact same code
//! instantiated with `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Strided view of a row-major matrix operand for [`Float::gemm`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a, F> MatRef<'a, F> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [F], cols: usize) -> Self {
        Self { data, row_stride: cols as isize, col_stride: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [F], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols as isize }
    }
}

pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a @ b + beta * c` for an `m x k` times `k x n` product, `c` row-major.
    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]);
}

fn check_extent<F>(mat: &MatRef<'_, F>, rows: usize, cols: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * mat.row_stride + (cols as isize - 1) * mat.col_stride;
    assert!(
        mat.row_stride >= 0 && mat.col_stride >= 0 && (last as usize) < mat.data.len(),
        "gemm operand out of bounds"
    );
}

macro_rules! impl_float {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Float for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: &mut [Self],
            ) {
                check_extent(&a, m, k);
                check_extent(&b, k, n);
                assert!(c.len() >= m * n, "gemm output too small");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                // SAFETY: extents of all three operands were checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.row_stride,
                        a.col_stride,
                        b.data.as_ptr(),
                        b.row_stride,
                        b.col_stride,
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

impl_float!(f32, "f32", matrixmultiply::sgemm);
impl_float!(f64, "f64", matrixmultiply::dgemm);
