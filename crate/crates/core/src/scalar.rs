//! Element type abstraction: f32 for training, f64 for gradient checks.

use crate::fastmath;

/// Floating-point element of a [`crate::Tensor`].
///
/// Training runs in `f32`; the finite-difference gradient oracle instantiates
/// the same code in `f64` for headroom. `exp_act`/`tanh_act` are the
/// activation-path transcendentals: polynomial approximations in f32 (hot
/// loops), exact libm in f64 (so the oracle checks against exact math).
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64s(self) -> f64;

    fn exp_act(self) -> Self;
    fn tanh_act(self) -> Self;

    /// `c = alpha * a@b + beta * c` with arbitrary strides, row-major default.
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
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64s(self) -> f64 {
        self as f64
    }

    fn exp_act(self) -> Self {
        fastmath::exp_f32(self)
    }
    fn tanh_act(self) -> Self {
        fastmath::tanh_f32(self)
    }

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

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64s(self) -> f64 {
        self
    }

    fn exp_act(self) -> Self {
        self.exp()
    }
    fn tanh_act(self) -> Self {
        self.tanh()
    }

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
