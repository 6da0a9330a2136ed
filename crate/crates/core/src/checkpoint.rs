//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HSNN"  u32 version
//! u32 len, descriptor (UTF-8)
//! u32 len, training config record (UTF-8 `key = value` lines)
//! per parameterized layer, then per shortcut projection:
//!     u32 tensor count
//!     per tensor: u8 dtype (0 = f32, 1 = f64), u8 ndim, ndim × u32 dims, data
//! ```
//!
//! Conv and linear layers store `[weight, bias]`, batch norm stores
//! `[gamma, beta, running_mean, running_var]`, spike layers store
//! `[v_th, ema_ext]` with an empty `ema_ext` before the first training step.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ArchDescriptor, Layer, NetworkModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{build_model, TrainConfig};

pub const MAGIC: [u8; 4] = *b"HSNN";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE_TAG);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        if T::DTYPE_TAG == 0 {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
    }
}

fn layer_tensors<T: Scalar>(layer: &Layer<T>) -> Option<Vec<Tensor<T>>> {
    match layer {
        Layer::Conv(c) => Some(vec![c.weight.clone(), c.bias.clone()]),
        Layer::Linear(l) => Some(vec![l.weight.clone(), l.bias.clone()]),
        Layer::BatchNorm(b) => Some(vec![
            b.gamma.clone(),
            b.beta.clone(),
            b.running.mean.clone(),
            b.running.var.clone(),
        ]),
        Layer::Spike(s) => {
            let ema = match &s.ema_ext {
                Some(e) => Tensor::from_vec([e.len()], e.clone()).expect("length matches"),
                None => Tensor::zeros([0]),
            };
            Some(vec![Tensor::from_vec([1], vec![s.v_th]).expect("one element"), ema])
        }
        _ => None,
    }
}

/// Serializes `model` together with the config it was trained with.
pub fn to_bytes<T: Scalar>(model: &NetworkModel<T>, cfg: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, model.descriptor());
    put_str(&mut out, &cfg.to_record());
    let mut groups: Vec<Vec<Tensor<T>>> = model.layers().iter().filter_map(layer_tensors).collect();
    for sc in model.shortcuts() {
        if let Some(p) = &sc.projection {
            groups.push(vec![p.weight.clone(), p.bias.clone()]);
        }
    }
    for g in groups {
        put_u32(&mut out, g.len() as u32);
        for t in &g {
            put_tensor(&mut out, t);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let offset = self.pos as u64;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format {
            offset,
            message: format!("invalid UTF-8: {e}"),
        })
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let offset = self.pos as u64;
        let tag = self.u8()?;
        let width = match tag {
            0 => 4,
            1 => 8,
            other => {
                return Err(Error::Format {
                    offset,
                    message: format!("unknown dtype tag {other}"),
                })
            }
        };
        let ndim = self.u8()? as usize;
        let shape = (0..ndim).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Format {
                offset,
                message: format!("tensor shape {shape:?} overflows"),
            })?;
        let raw = self.take(len)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                } else {
                    T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect();
        Tensor::from_vec(shape, data)
    }
}

fn assign<T: Scalar>(dst: &mut Tensor<T>, src: Tensor<T>, what: &str) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::shape(format!(
            "{what}: checkpoint has {:?}, model expects {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    *dst = src;
    Ok(())
}

/// Parses a checkpoint, rebuilding the model from its descriptor and config.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(NetworkModel<T>, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let desc: ArchDescriptor = r.string()?.parse()?;
    let cfg = TrainConfig::from_record(&r.string()?)?;
    let mut model: NetworkModel<T> = build_model(&desc, &cfg)?;

    let read_group = |r: &mut Reader, expected: usize, name: String| -> Result<Vec<Tensor<T>>> {
        let offset = r.pos as u64;
        let n = r.u32()? as usize;
        if n != expected {
            return Err(Error::Format {
                offset,
                message: format!("{name}: {n} tensors, expected {expected}"),
            });
        }
        (0..n).map(|_| r.tensor()).collect()
    };

    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let name = format!("layer {i} ({})", layer.kind_name());
        match layer {
            Layer::Conv(c) => {
                let mut t = read_group(&mut r, 2, name.clone())?.into_iter();
                assign(&mut c.weight, t.next().expect("2 tensors"), &name)?;
                assign(&mut c.bias, t.next().expect("2 tensors"), &name)?;
            }
            Layer::Linear(l) => {
                let mut t = read_group(&mut r, 2, name.clone())?.into_iter();
                assign(&mut l.weight, t.next().expect("2 tensors"), &name)?;
                assign(&mut l.bias, t.next().expect("2 tensors"), &name)?;
            }
            Layer::BatchNorm(b) => {
                let mut t = read_group(&mut r, 4, name.clone())?.into_iter();
                assign(&mut b.gamma, t.next().expect("4 tensors"), &name)?;
                assign(&mut b.beta, t.next().expect("4 tensors"), &name)?;
                assign(&mut b.running.mean, t.next().expect("4 tensors"), &name)?;
                assign(&mut b.running.var, t.next().expect("4 tensors"), &name)?;
            }
            Layer::Spike(s) => {
                let mut t = read_group(&mut r, 2, name.clone())?.into_iter();
                let v_th = t.next().expect("2 tensors");
                let ema = t.next().expect("2 tensors");
                if v_th.shape() != [1] || ema.ndim() != 1 {
                    return Err(Error::shape(format!(
                        "{name}: threshold {:?} / extremum {:?}",
                        v_th.shape(),
                        ema.shape()
                    )));
                }
                s.v_th = v_th.data()[0];
                s.ema_ext = (!ema.is_empty()).then(|| ema.into_data());
            }
            _ => {}
        }
    }
    for (j, sc) in model.shortcuts_mut().iter_mut().enumerate() {
        if let Some(p) = &mut sc.projection {
            let name = format!("shortcut {j} projection");
            let mut t = read_group(&mut r, 2, name.clone())?.into_iter();
            assign(&mut p.weight, t.next().expect("2 tensors"), &name)?;
            assign(&mut p.bias, t.next().expect("2 tensors"), &name)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    model.set_quantization(cfg.quant());
    Ok((model, cfg))
}

pub fn save<T: Scalar>(path: &Path, model: &NetworkModel<T>, cfg: &TrainConfig) -> Result<()> {
    fs::write(path, to_bytes(model, cfg))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(NetworkModel<T>, TrainConfig)> {
    from_bytes(&fs::read(path)?)
}
