//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{BatchNormStats, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
