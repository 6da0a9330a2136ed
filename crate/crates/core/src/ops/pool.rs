use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flat input index of each output element's maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgmaxMap {
    pub indices: Vec<usize>,
    pub input_shape: Vec<usize>,
}

pub fn pool_output_hw(height: usize, width: usize, k: usize, s: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(Error::invalid("pool window and stride must be >= 1"));
    }
    if k > height || k > width {
        return Err(Error::invalid(format!(
            "pool window {k} larger than input {height}x{width}"
        )));
    }
    Ok(((height - k) / s + 1, (width - k) / s + 1))
}

/// Max pooling over `[B×C×H×W]`; ties resolve to the first element in
/// row-major window order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, k: usize, s: usize) -> Result<(Tensor<T>, ArgmaxMap)> {
    let [b, c, h, w] = *x.shape() else {
        return Err(Error::shape(format!("maxpool input must be 4-D, got {:?}", x.shape())));
    };
    let (oh, ow) = pool_output_hw(h, w, k, s)?;
    let mut y = Tensor::zeros([b, c, oh, ow]);
    let mut indices = Vec::with_capacity(b * c * oh * ow);
    let xd = x.data();
    let yd = y.data_mut();
    let mut out = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + i * s * w + j * s;
                let mut best = xd[best_idx];
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (i * s + di) * w + j * s + dj;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                yd[out] = best;
                indices.push(best_idx);
                out += 1;
            }
        }
    }
    Ok((
        y,
        ArgmaxMap {
            indices,
            input_shape: x.shape().to_vec(),
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(grad_y: &Tensor<T>, argmax: &ArgmaxMap) -> Result<Tensor<T>> {
    if grad_y.len() != argmax.indices.len() {
        return Err(Error::shape(format!(
            "maxpool backward: {} gradients for {} recorded maxima",
            grad_y.len(),
            argmax.indices.len()
        )));
    }
    let mut gx = Tensor::zeros(argmax.input_shape.clone());
    let gxd = gx.data_mut();
    for (&idx, &g) in argmax.indices.iter().zip(grad_y.data()) {
        gxd[idx] += g;
    }
    Ok(gx)
}
