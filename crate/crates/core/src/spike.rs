//! One-time-step spiking activation with a Hoyer-extremum threshold.
//!
//! The membrane potential `u` is normalized by the trainable clip level
//! `v_th`; a neuron fires when `z = u/v_th` reaches the Hoyer extremum of
//! `clip(z, 0, 1)`. Training uses the extremum of the current batch and tracks
//! an exponential average of it; inference fires against that average.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hoyer::{clip_unit, hoyer_extremum, ExtremumMode};
use crate::ops::batchnorm::{channel_layout, Phase};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const V_TH_FLOOR: f64 = 1e-3;
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.9;
pub const DEFAULT_SURROGATE_SCALE: f64 = 1.0;

/// Firing rule of a spike layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SpikeKind {
    /// Fire at `z ≥ Ext(clip(z))`.
    #[default]
    Hoyer,
    /// Fire at `z ≥ 1`, i.e. `u ≥ v_th`.
    Plain,
    /// Debug pass-through `o = u`.
    Identity,
}

impl fmt::Display for SpikeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpikeKind::Hoyer => "hoyer",
            SpikeKind::Plain => "plain",
            SpikeKind::Identity => "identity",
        })
    }
}

impl FromStr for SpikeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hoyer" => Ok(SpikeKind::Hoyer),
            "plain" => Ok(SpikeKind::Plain),
            "identity" => Ok(SpikeKind::Identity),
            other => Err(Error::Config(format!("unknown spike kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoyerSpikeState<T> {
    pub v_th: T,
    /// Averaged extremum per reduction group; `None` until the first update.
    pub ema_ext: Option<Vec<T>>,
    pub ema_momentum: T,
    pub mode: ExtremumMode,
    pub surrogate_scale: T,
    pub kind: SpikeKind,
}

impl<T: Scalar> HoyerSpikeState<T> {
    pub fn new(mode: ExtremumMode) -> Self {
        HoyerSpikeState {
            v_th: T::one(),
            ema_ext: None,
            ema_momentum: T::lit(DEFAULT_EMA_MOMENTUM),
            mode,
            surrogate_scale: T::lit(DEFAULT_SURROGATE_SCALE),
            kind: SpikeKind::Hoyer,
        }
    }

    pub fn clamp_threshold(&mut self) {
        let floor = T::lit(V_TH_FLOOR);
        if !(self.v_th >= floor) {
            self.v_th = floor;
        }
    }

    /// Inference-time firing level per group.
    pub fn inference_threshold(&self) -> Vec<T> {
        match (self.kind, &self.ema_ext) {
            (SpikeKind::Hoyer, Some(ema)) => ema.clone(),
            _ => vec![T::one()],
        }
    }
}

/// Blends a batch extremum into the running average; the first call copies it.
pub fn ema_update<T: Scalar>(state: &mut HoyerSpikeState<T>, batch_ext: &[T]) {
    let m = state.ema_momentum;
    match &mut state.ema_ext {
        Some(ema) if ema.len() == batch_ext.len() => {
            for (e, &b) in ema.iter_mut().zip(batch_ext) {
                *e = m * *e + (T::one() - m) * b;
            }
        }
        slot => *slot = Some(batch_ext.to_vec()),
    }
}

#[derive(Clone, Debug)]
pub struct SpikeCache<T> {
    pub u: Tensor<T>,
    pub z: Tensor<T>,
    /// Firing level per group (length 1 or channel count).
    pub threshold_used: Vec<T>,
    pub v_th: T,
    pub surrogate_scale: T,
    pub kind: SpikeKind,
    pub spikes: u64,
}

impl<T: Scalar> SpikeCache<T> {
    /// Number of elements per channel group for an activation shape.
    fn group_of(shape: &[usize], groups: usize) -> impl Fn(usize) -> usize {
        let (c, sp) = if groups > 1 {
            let (_, c, sp) = channel_layout(shape).unwrap_or((1, 1, 1));
            (c, sp)
        } else {
            (1, usize::MAX)
        };
        move |i| if c == 1 { 0 } else { (i / sp) % c }
    }

    /// Binary output recomputed from the cached potentials.
    pub fn output(&self) -> Tensor<T> {
        fire(&self.z, &self.threshold_used, self.kind, &self.u)
    }
}

fn fire<T: Scalar>(z: &Tensor<T>, thresholds: &[T], kind: SpikeKind, u: &Tensor<T>) -> Tensor<T> {
    if kind == SpikeKind::Identity {
        return u.clone();
    }
    let group = SpikeCache::<T>::group_of(z.shape(), thresholds.len());
    let mut o = Tensor::zeros(z.shape().to_vec());
    for (i, (out, &zv)) in o.data_mut().iter_mut().zip(z.data()).enumerate() {
        if zv >= thresholds[group(i)] {
            *out = T::one();
        }
    }
    o
}

/// Forward pass; in the training phase the batch extremum drives firing and,
/// when `update_ema` is set, is folded into `state.ema_ext`.
pub fn spike_forward<T: Scalar>(
    u: &Tensor<T>,
    state: &mut HoyerSpikeState<T>,
    phase: Phase,
) -> Result<(Tensor<T>, SpikeCache<T>)> {
    spike_forward_with(u, state, phase, true)
}

pub fn spike_forward_with<T: Scalar>(
    u: &Tensor<T>,
    state: &mut HoyerSpikeState<T>,
    phase: Phase,
    update_ema: bool,
) -> Result<(Tensor<T>, SpikeCache<T>)> {
    let v_th = state.v_th;
    if !(v_th.as_f64() >= V_TH_FLOOR * (1.0 - 1e-6)) {
        return Err(Error::invalid(format!("threshold {v_th} below floor {V_TH_FLOOR}")));
    }
    let inv = T::one() / v_th;
    let z = u.map(|x| x * inv);
    let threshold_used = match (state.kind, phase) {
        (SpikeKind::Hoyer, Phase::Train) => {
            let ext = hoyer_extremum(&clip_unit(&z), state.mode)?;
            let batch: Vec<T> = ext.or_fallback(1.0).into_iter().map(T::lit).collect();
            if update_ema {
                ema_update(state, &batch);
            }
            batch
        }
        (SpikeKind::Hoyer, Phase::Infer) => state.inference_threshold(),
        (SpikeKind::Plain, _) => vec![T::one()],
        (SpikeKind::Identity, _) => Vec::new(),
    };
    let o = fire(&z, &threshold_used, state.kind, u);
    let spikes = if state.kind == SpikeKind::Identity {
        0
    } else {
        o.data().iter().filter(|&&v| v > T::zero()).count() as u64
    };
    Ok((
        o,
        SpikeCache {
            u: u.clone(),
            z,
            threshold_used,
            v_th,
            surrogate_scale: state.surrogate_scale,
            kind: state.kind,
            spikes,
        },
    ))
}

/// Window derivative: `scale` on `0 < z < 2`, zero elsewhere.
pub fn surrogate_grad<T: Scalar>(z: &Tensor<T>, scale: T) -> Tensor<T> {
    let two = T::lit(2.0);
    z.map(|v| if v > T::zero() && v < two { scale } else { T::zero() })
}

/// Returns `(∂L/∂u, ∂L/∂v_th)`; the extremum is treated as a constant.
pub fn spike_backward<T: Scalar>(grad_o: &Tensor<T>, cache: &SpikeCache<T>) -> Result<(Tensor<T>, T)> {
    grad_o.check_same_shape(&cache.u)?;
    if cache.kind == SpikeKind::Identity {
        return Ok((grad_o.clone(), T::zero()));
    }
    let grad_z = grad_o.zip_map(&surrogate_grad(&cache.z, cache.surrogate_scale), |g, s| g * s)?;
    let inv = T::one() / cache.v_th;
    let grad_u = grad_z.map(|g| g * inv);
    let k = -(inv * inv);
    let grad_vth = grad_z
        .data()
        .iter()
        .zip(cache.u.data())
        .map(|(&g, &u)| g * u * k)
        .sum();
    Ok((grad_u, grad_vth))
}
