//! LLR conventions shared by every soft detector.
//!
//! `LLR = log p(b = +1) / p(b = -1)`; bit 0 maps to +1 and bit 1 to -1.

/// Every LLR handed to `tanh` or a decoder is clamped to this magnitude.
pub const LLR_CLAMP: f64 = 30.0;

/// Lower bound on Gaussian prior variances `1 - b̃²`.
pub const VAR_FLOOR: f64 = 1e-6;

/// Discrete beliefs are kept within `|m| <= 1 - M_MARGIN`.
pub const M_MARGIN: f64 = 1e-9;

pub fn clamp_llr(l: f64) -> f64 {
    l.clamp(-LLR_CLAMP, LLR_CLAMP)
}

/// Soft bit `tanh(L/2)` of a clamped LLR.
pub fn soft_bit(l: f64) -> f64 {
    (clamp_llr(l) / 2.0).tanh()
}

/// Soft bit restricted so that `1 - b̃² >= VAR_FLOOR`.
pub fn gaussian_soft_bit(b: f64) -> f64 {
    let lim = (1.0 - VAR_FLOOR).sqrt();
    b.clamp(-lim, lim)
}

pub fn clamp_m(m: f64) -> f64 {
    m.clamp(-1.0 + M_MARGIN, 1.0 - M_MARGIN)
}

pub fn bit_to_symbol(bit: u8) -> f64 {
    if bit == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Hard decision on an LLR: non-negative decides bit 0.
pub fn hard_bit(l: f64) -> u8 {
    u8::from(l < 0.0)
}

/// Numerically safe `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
