//! Floating-point element type shared by every numeric module.
//!
//! Everything in the crate is generic over [`Scalar`]; `f32` is the working
//! precision for training and inference, `f64` is used to verify gradients and
//! surgery exactness.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::instrument;

/// Element type of tensors and models.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Name used in checkpoint manifests and reports.
    const DTYPE: &'static str;

    /// `c = a · b (+ c when accumulate)` on strided row-major views.
    ///
    /// `a` is `m × k` with strides `(rsa, csa)`, `b` is `k × n` with strides
    /// `(rsb, csb)`, `c` is a dense `m × n` block with row stride `ldc`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        ldc: usize,
        accumulate: bool,
    );

    /// `eᵡ` in a branch-free form the compiler can vectorize.
    fn exp_fast(self) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds ({last} >= {len})");
}

/// Cephes-style single-precision exponential: `2ᵏ · p(r)` with
/// `x = k·ln2 + r`, `|r| ≤ ln2/2`. Within 2 ulp on the clamped range
/// `[-87, 88]`; NaN propagates.
#[inline(always)]
fn expf_poly(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5·2²³ rounds to the nearest integer without a round instruction.
    const SHIFT: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let kf = x * LOG2E + SHIFT;
    let ki = kf.to_bits() as i32 - SHIFT.to_bits() as i32;
    let k = kf - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((ki + 127) as u32) << 23)
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path, $exp:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            #[inline(always)]
            fn exp_fast(self) -> Self {
                $exp(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                ldc: usize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(c.len(), m, n, ldc, 1, "c");
                if k == 0 {
                    if !accumulate {
                        for row in 0..m {
                            c[row * ldc..row * ldc + n].fill(0.0);
                        }
                    }
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa, "a");
                check_extent(b.len(), k, n, rsb, csb, "b");
                instrument::record_macs((m * k * n) as u64);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every operand extent was bounds-checked above and
                // `c` does not alias `a` or `b` (distinct borrows).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        ldc as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, expf_poly);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, f64::exp);
