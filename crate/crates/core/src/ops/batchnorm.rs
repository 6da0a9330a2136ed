//! Per-channel batch normalization over axis 1 of `[B×C]` or `[B×C×H×W]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros([channels]),
            var: Tensor::full([channels], T::one()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub phase: Phase,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub gamma: Vec<T>,
}

/// `(batch, channels, spatial)` for a channel-major activation.
pub fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, rest @ ..] if !rest.is_empty() => Ok((*b, *c, rest.iter().product())),
        _ => Err(Error::shape(format!("expected a channel axis, got shape {shape:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    phase: Phase,
    momentum: T,
    eps: T,
    update_running: bool,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (b, c, sp) = channel_layout(x.shape())?;
    if b == 0 {
        return Err(Error::invalid("batch norm on an empty batch"));
    }
    if eps <= T::zero() {
        return Err(Error::invalid("batch norm eps must be > 0"));
    }
    if gamma.len() != c || beta.len() != c || running.mean.len() != c {
        return Err(Error::shape(format!(
            "batch norm parameters sized {} for {c} channels",
            gamma.len()
        )));
    }
    let xd = x.data();
    let count = b * sp;
    let (mean, var) = match phase {
        Phase::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for n in 0..b {
                for ch in 0..c {
                    let s = &xd[(n * c + ch) * sp..(n * c + ch + 1) * sp];
                    mean[ch] += s.iter().copied().sum::<T>();
                }
            }
            let inv_n = T::one() / T::from_usize_lossy(count);
            for m in mean.iter_mut() {
                *m *= inv_n;
            }
            for n in 0..b {
                for ch in 0..c {
                    let s = &xd[(n * c + ch) * sp..(n * c + ch + 1) * sp];
                    var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                }
            }
            for v in var.iter_mut() {
                *v *= inv_n;
            }
            if update_running {
                let unbias = if count > 1 {
                    T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
                } else {
                    T::one()
                };
                let keep = T::one() - momentum;
                for ch in 0..c {
                    let rm = &mut running.mean.data_mut()[ch];
                    *rm = keep * *rm + momentum * mean[ch];
                    let rv = &mut running.var.data_mut()[ch];
                    *rv = keep * *rv + momentum * var[ch] * unbias;
                }
            }
            (mean, var)
        }
        Phase::Infer => (running.mean.data().to_vec(), running.var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape().to_vec());
    let mut y = Tensor::zeros(x.shape().to_vec());
    {
        let xh = x_hat.data_mut();
        let yd = y.data_mut();
        for n in 0..b {
            for ch in 0..c {
                let range = (n * c + ch) * sp..(n * c + ch + 1) * sp;
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for i in range {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xh[i] = h;
                    yd[i] = g * h + bt;
                }
            }
        }
    }
    Ok((
        y,
        BnCache {
            phase,
            x_hat,
            inv_std,
            gamma: gamma.data().to_vec(),
        },
    ))
}

pub struct BnGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(grad_y: &Tensor<T>, cache: &BnCache<T>) -> Result<BnGrads<T>> {
    if cache.phase != Phase::Train {
        return Err(Error::invalid("batch norm backward needs a training-phase cache"));
    }
    grad_y.check_same_shape(&cache.x_hat)?;
    let (b, c, sp) = channel_layout(grad_y.shape())?;
    let gy = grad_y.data();
    let xh = cache.x_hat.data();
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            for i in (n * c + ch) * sp..(n * c + ch + 1) * sp {
                g_beta[ch] += gy[i];
                g_gamma[ch] += gy[i] * xh[i];
            }
        }
    }
    // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
    let count = T::from_usize_lossy(b * sp);
    let mut gx = Tensor::zeros(grad_y.shape().to_vec());
    let gxd = gx.data_mut();
    for n in 0..b {
        for ch in 0..c {
            let k = cache.gamma[ch] * cache.inv_std[ch] / count;
            for i in (n * c + ch) * sp..(n * c + ch + 1) * sp {
                gxd[i] = k * (count * gy[i] - g_beta[ch] - xh[i] * g_gamma[ch]);
            }
        }
    }
    Ok(BnGrads {
        x: gx,
        gamma: Tensor::from_vec([c], g_gamma)?,
        beta: Tensor::from_vec([c], g_beta)?,
    })
}
