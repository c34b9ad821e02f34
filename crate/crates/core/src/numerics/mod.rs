//! Dense tensors, the handful of differentiable kernels the encoder and the
//! losses need, a reverse-mode tape over those kernels, and SGD with momentum.
//!
//! Everything is generic over [`Real`], implemented for `f32` (training and
//! evaluation) and `f64` (gradient verification against finite differences).

mod graph;
mod kernels;
mod optim;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use graph::{Graph, Var};
pub use kernels::{bilinear_resize, conv2d, conv_output_size, maxpool2d, nearest_index, relu, softmax_over_classes};
pub use optim::{sgd_step, zero_grad, Parameter};
pub use tensor::Tensor;

/// Scalar element type of a [`Tensor`].
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`, where
    /// either input may be supplied transposed (stored as `k×m` / `n×k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical rows×cols view of a buffer that is stored either as-is or transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_transposed);
                let (rsb, csb) = gemm_strides(k, n, b_transposed);
                // SAFETY: the slices cover every index reachable from the
                // strides above (checked by the assert).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expected = [4.0, 5.0, 10.0, 11.0];
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0f64; 4];
                f64::gemm(2, 3, 2, aa, ta, bb, tb, 0.0, &mut c);
                assert_eq!(c, expected);
            }
        }
        let mut c = [1.0f32; 4];
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        f32::gemm(2, 3, 2, &af, false, &bf, false, 1.0, &mut c);
        assert_eq!(c, [5.0, 6.0, 11.0, 12.0]);
    }
}
