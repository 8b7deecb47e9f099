//! Floating-point element type used by tensors, models and aggregation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Row and column strides of a matrix operand stored in a flat slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major layout with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Strides { row: cols as isize, col: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Strides { row: 1, col: cols as isize }
    }
}

/// Float types the simulator can train in.
///
/// Everything numeric in the crate is generic over this trait; `f64` is the
/// precision used by the simulator itself (see the aliases at the crate root).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = a·b + (accumulate ? c : 0)` for an `m×k` by `k×n` product.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: Strides,
        b: &[Self],
        b_strides: Strides,
        c: &mut [Self],
        accumulate: bool,
    );

    /// Converts an `f64` literal, panicking only for values the type cannot represent at all.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s.row as usize + (cols - 1) * s.col as usize + 1
}

#[allow(clippy::too_many_arguments)]
fn check_operands<T>(m: usize, k: usize, n: usize, a: &[T], sa: Strides, b: &[T], sb: Strides, c: &[T]) {
    assert!(sa.row >= 0 && sa.col >= 0 && sb.row >= 0 && sb.col >= 0);
    assert!(a.len() >= span(m, k, sa), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, sb), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: Strides,
                b: &[Self],
                b_strides: Strides,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_operands(m, k, n, a, a_strides, b, b_strides, c);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: operand extents were checked against the strides above and the
                // output is a dense row-major m×n block inside `c`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.row,
                        a_strides.col,
                        b.as_ptr(),
                        b_strides.row,
                        b_strides.col,
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

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);
