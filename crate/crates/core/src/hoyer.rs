//! Hoyer sparsity measure `H(u) = (‖u‖₁/‖u‖₂)²`, its gradient, its
//! stationary point `Ext(u) = ‖u‖₂²/‖u‖₁`, and the unit clip.
//!
//! Reductions accumulate in `f64` regardless of the element type.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::batchnorm::channel_layout;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the extremum is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ExtremumMode {
    /// One value over the whole tensor.
    TensorWise,
    /// One value per channel (axis 1), pooling batch and spatial axes.
    #[default]
    ChannelWise,
}

impl fmt::Display for ExtremumMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtremumMode::TensorWise => "tensor",
            ExtremumMode::ChannelWise => "channel",
        })
    }
}

impl FromStr for ExtremumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" | "tensor_wise" => Ok(ExtremumMode::TensorWise),
            "channel" | "channel_wise" => Ok(ExtremumMode::ChannelWise),
            other => Err(Error::Config(format!("unknown extremum mode `{other}`"))),
        }
    }
}

/// Extremum per reduction group; `None` marks an all-zero group.
#[derive(Clone, Debug, PartialEq)]
pub enum Extremum {
    TensorWise(Option<f64>),
    ChannelWise(Vec<Option<f64>>),
}

impl Extremum {
    pub fn groups(&self) -> Vec<Option<f64>> {
        match self {
            Extremum::TensorWise(v) => vec![*v],
            Extremum::ChannelWise(v) => v.clone(),
        }
    }

    /// Replaces undefined groups with `fallback`.
    pub fn or_fallback(&self, fallback: f64) -> Vec<f64> {
        self.groups().into_iter().map(|v| v.unwrap_or(fallback)).collect()
    }
}

fn norms<T: Scalar>(values: impl Iterator<Item = T>) -> (f64, f64) {
    values.fold((0.0, 0.0), |(l1, l2sq), v| {
        let v = v.as_f64();
        (l1 + v.abs(), l2sq + v * v)
    })
}

/// `(‖u‖₁/‖u‖₂)²`, with `H(0) = 0`.
pub fn hoyer_square<T: Scalar>(u: &Tensor<T>) -> f64 {
    let (l1, l2sq) = norms(u.data().iter().copied());
    if l2sq == 0.0 {
        0.0
    } else {
        l1 * l1 / l2sq
    }
}

/// `2·sign(u)·‖u‖₁/‖u‖₂⁴·(‖u‖₂² − ‖u‖₁·|u|)`, zero at the zero tensor.
pub fn hoyer_grad<T: Scalar>(u: &Tensor<T>) -> Tensor<T> {
    let (l1, l2sq) = norms(u.data().iter().copied());
    if l2sq == 0.0 {
        return Tensor::zeros(u.shape().to_vec());
    }
    let k = 2.0 * l1 / (l2sq * l2sq);
    u.map(|v| {
        let x = v.as_f64();
        let sign = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        T::lit(sign * k * (l2sq - l1 * x.abs()))
    })
}

fn extremum_of(l1: f64, l2sq: f64) -> Option<f64> {
    if l1 == 0.0 {
        None
    } else {
        Some(l2sq / l1)
    }
}

/// `‖u‖₂²/‖u‖₁` over the whole tensor or per channel.
pub fn hoyer_extremum<T: Scalar>(u: &Tensor<T>, mode: ExtremumMode) -> Result<Extremum> {
    match mode {
        ExtremumMode::TensorWise => {
            let (l1, l2sq) = norms(u.data().iter().copied());
            Ok(Extremum::TensorWise(extremum_of(l1, l2sq)))
        }
        ExtremumMode::ChannelWise => {
            let (b, c, sp) = channel_layout(u.shape())
                .map_err(|_| Error::invalid(format!("channel-wise extremum needs a channel axis, got {:?}", u.shape())))?;
            let mut acc = vec![(0.0f64, 0.0f64); c];
            let d = u.data();
            for n in 0..b {
                for (ch, slot) in acc.iter_mut().enumerate() {
                    let (l1, l2sq) = norms(d[(n * c + ch) * sp..(n * c + ch + 1) * sp].iter().copied());
                    slot.0 += l1;
                    slot.1 += l2sq;
                }
            }
            Ok(Extremum::ChannelWise(
                acc.into_iter().map(|(l1, l2sq)| extremum_of(l1, l2sq)).collect(),
            ))
        }
    }
}

/// Elementwise clamp to `[0, 1]`.
pub fn clip_unit<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| {
        if v > T::one() {
            T::one()
        } else if v < T::zero() {
            T::zero()
        } else {
            v
        }
    })
}
