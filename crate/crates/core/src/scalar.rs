//! Real scalar abstraction shared by tensors, models and training.
//!
//! Models run in `f32`; `f64` exists so finite-difference gradient checks
//! have enough precision to resolve 1e-4 relative errors.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = a · b (+ c when accumulate)`, `a` is `m×k`, `b` is `k×n`, all row-major.
    /// A `*_t` flag means the operand is stored transposed (`k×m` / `n×k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows × cols) view of a buffer stored either as given or transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe views inside each slice.
                unsafe {
                    $kernel(
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

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
