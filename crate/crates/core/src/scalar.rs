//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Elem`] so the same kernels run at `f32`
//! or `f64`. The shipped experiments pin `f64` (see the aliases at the crate
//! root): 64-bit precision is what makes the tight gradient-check tolerances
//! and bit-reproducible reruns possible. `f32` remains available for smoke
//! tests and quick exploration.

use num_traits::{Float, FromPrimitive, NumAssign, NumCast};

/// Floating-point element usable by the dense kernels.
///
/// The only method beyond the `num-traits` bundle is [`Elem::gemm`], which
/// routes matrix products to `matrixmultiply`'s SIMD kernels without putting a
/// trait object in the hot path.
///
/// Random draws elsewhere in the crate are always taken in `f64` and narrowed
/// with [`Elem::from_f64_lossy`], so a given seed produces the same underlying
/// sample stream no matter which scalar the model is instantiated at.
pub trait Elem:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    /// `C ← alpha·op(A)·op(B) + beta·C` on raw buffers with explicit strides.
    ///
    /// Strides are in elements; transposition is expressed by swapping the
    /// row/column strides of an operand. Dimensions: `A` is `m×k`, `B` is
    /// `k×n`, `C` is `m×n`.
    ///
    /// # Safety
    /// The pointers must be valid for the extents implied by the dimensions
    /// and strides, and `C` must not alias `A` or `B`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Convert from `f64`, rounding to the nearest representable value.
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 converts to any Elem")
    }

    /// Widen to `f64` (exact for both supported scalars' typical range).
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).expect("Elem converts to f64")
    }
}

impl Elem for f32 {
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Elem for f64 {
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
