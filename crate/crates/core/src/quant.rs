//! Symmetric per-layer weight quantization for conv layers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    pub bits: u8,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Ok(QuantConfig { bits })
    }

    /// Positive grid levels `2^(bits−1) − 1`.
    pub fn levels(self) -> u32 {
        levels(self.bits)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!(
            "quantization bits must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
        )));
    }
    Ok(())
}

fn levels(bits: u8) -> u32 {
    (1u32 << (bits - 1)) - 1
}

/// `w_q = round(w/s·L)/L·s` with `s = max|w|`; returns `(w_q, s)`.
///
/// An all-zero tensor is returned unchanged with scale 0.
pub fn quantize_weights<T: Scalar>(w: &Tensor<T>, bits: u8) -> Result<(Tensor<T>, T)> {
    check_bits(bits)?;
    let s = w.max_abs();
    if s == T::zero() {
        return Ok((w.clone(), T::zero()));
    }
    if !s.is_finite() {
        return Err(Error::invalid("cannot quantize non-finite weights"));
    }
    let l = T::from_usize_lossy(levels(bits) as usize);
    // (k/L)·s keeps grid points exactly reproducible, so quantizing twice is a
    // no-op. Adding zero folds −0 into +0.
    Ok((w.map(|v| (v / s * l).round() / l * s + T::zero()), s))
}
