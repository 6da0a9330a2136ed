//! 2-D cross-correlation via im2col + GEMM.
//!
//! Samples are processed in fixed chunks; weight-gradient partial sums are
//! reduced in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *x_shape else {
            return Err(Error::shape(format!("conv input must be 4-D, got {x_shape:?}")));
        };
        let [out_channels, w_in, kernel, k2] = *w_shape else {
            return Err(Error::shape(format!("conv weight must be 4-D, got {w_shape:?}")));
        };
        if w_in != in_channels || kernel != k2 {
            return Err(Error::shape(format!(
                "conv weight {w_shape:?} incompatible with input {x_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        let (out_height, out_width) = output_hw(height, width, kernel, stride, pad)?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            pad,
            out_height,
            out_width,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.col_cols()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Multiply-accumulates per sample.
    pub fn macs_per_sample(&self) -> u64 {
        (self.col_cols() * self.out_channels * self.col_rows()) as u64
    }
}

/// Spatial output size `(H + 2·pad − k)/stride + 1`, floored.
pub fn output_hw(height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("kernel and stride must be >= 1"));
    }
    if kernel > height + 2 * pad || kernel > width + 2 * pad {
        return Err(Error::invalid(format!(
            "kernel {kernel} exceeds padded input {height}x{width} (pad {pad})"
        )));
    }
    Ok((
        (height + 2 * pad - kernel) / stride + 1,
        (width + 2 * pad - kernel) / stride + 1,
    ))
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n_cols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.out_height {
                    let ih = (oh * s) as isize - p + ki as isize;
                    let dst_row = &mut dst[oh * g.out_width..(oh + 1) * g.out_width];
                    if ih < 0 || ih >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * s) as isize - p + kj as isize;
                        *d = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n_cols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..g.out_height {
                    let ih = (oh * s) as isize - p + ki as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_width {
                        let iw = (ow * s) as isize - p + kj as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_width + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation: `x: [B×C×H×W]`, `w: [O×C×k×k]`, `bias: [O]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if bias.len() != g.out_channels {
        return Err(Error::shape(format!(
            "conv bias has {} entries for {} output channels",
            bias.len(),
            g.out_channels
        )));
    }
    let mut out = Tensor::zeros(g.output_shape());
    let (rows, n_cols) = (g.col_rows(), g.col_cols());
    out.data_mut()
        .par_chunks_mut(g.out_len())
        .zip(x.data().par_chunks(g.in_len()))
        .for_each_init(
            || vec![T::zero(); rows * n_cols],
            |cols, (y, xs)| {
                im2col(&g, xs, cols);
                for (o, plane) in y.chunks_mut(n_cols).enumerate() {
                    plane.fill(bias.data()[o]);
                }
                T::gemm(
                    g.out_channels,
                    rows,
                    n_cols,
                    T::one(),
                    w.data(),
                    (rows, 1),
                    cols,
                    (n_cols, 1),
                    T::one(),
                    y,
                    (n_cols, 1),
                );
            },
        );
    Ok(out)
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    conv2d_backward_with(grad_y, x, w, stride, pad, true)
}

/// As [`conv2d_backward`]; skips the input gradient when `need_grad_x` is false.
pub fn conv2d_backward_with<T: Scalar>(
    grad_y: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_grad_x: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if grad_y.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "conv backward: grad {:?} vs forward output {:?}",
            grad_y.shape(),
            g.output_shape()
        )));
    }
    let (rows, n_cols) = (g.col_rows(), g.col_cols());
    let mut grad_x = if need_grad_x {
        Some(Tensor::zeros(x.shape().to_vec()))
    } else {
        None
    };

    let gx_chunks: Vec<Option<&mut [T]>> = match grad_x.as_mut() {
        Some(t) => t
            .data_mut()
            .chunks_mut(g.in_len() * CHUNK)
            .map(Some)
            .collect(),
        None => (0..g.batch.div_ceil(CHUNK)).map(|_| None).collect(),
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = gx_chunks
        .into_par_iter()
        .enumerate()
        .map(|(chunk, mut gx)| {
            let mut gw = vec![T::zero(); g.out_channels * rows];
            let mut gb = vec![T::zero(); g.out_channels];
            let mut cols = vec![T::zero(); rows * n_cols];
            let mut dcols = if gx.is_some() {
                vec![T::zero(); rows * n_cols]
            } else {
                Vec::new()
            };
            let start = chunk * CHUNK;
            let end = (start + CHUNK).min(g.batch);
            for b in start..end {
                let xs = &x.data()[b * g.in_len()..(b + 1) * g.in_len()];
                let gy = &grad_y.data()[b * g.out_len()..(b + 1) * g.out_len()];
                im2col(&g, xs, &mut cols);
                T::gemm(
                    g.out_channels,
                    n_cols,
                    rows,
                    T::one(),
                    gy,
                    (n_cols, 1),
                    &cols,
                    (1, n_cols),
                    T::one(),
                    &mut gw,
                    (rows, 1),
                );
                for (o, plane) in gy.chunks(n_cols).enumerate() {
                    gb[o] += plane.iter().copied().sum::<T>();
                }
                if let Some(gx) = gx.as_deref_mut() {
                    T::gemm(
                        rows,
                        g.out_channels,
                        n_cols,
                        T::one(),
                        w.data(),
                        (1, rows),
                        gy,
                        (n_cols, 1),
                        T::zero(),
                        &mut dcols,
                        (n_cols, 1),
                    );
                    let local = b - start;
                    col2im(&g, &dcols, &mut gx[local * g.in_len()..(local + 1) * g.in_len()]);
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros([g.out_channels]);
    for (pw, pb) in partials {
        for (a, b) in gw.data_mut().iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in gb.data_mut().iter_mut().zip(pb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        x: grad_x,
        w: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Direct definition of the cross-correlation, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let g = ConvGeometry::new(x.shape(), w.shape(), s, p).unwrap();
        let mut out = Tensor::zeros(g.output_shape());
        let xd = x.data();
        let wd = w.data();
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oh in 0..g.out_height {
                    for ow in 0..g.out_width {
                        let mut acc = b.data()[o];
                        for c in 0..g.in_channels {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let ih = (oh * s + ki) as isize - p as isize;
                                    let iw = (ow * s + kj) as isize - p as isize;
                                    if ih < 0 || iw < 0 || ih >= g.height as isize || iw >= g.width as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + c) * g.height + ih as usize) * g.width + iw as usize;
                                    let wi = ((o * g.in_channels + c) * g.kernel + ki) * g.kernel + kj;
                                    acc += xd[xi] * wd[wi];
                                }
                            }
                        }
                        let oi = ((n * g.out_channels + o) * g.out_height + oh) * g.out_width + ow;
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let w = Tensor::<f64>::from_f64([1, 1, 1, 1], &[1.0]).unwrap();
        let y = conv2d_forward(&x, &w, &Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = Rng::new(2);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let w = Tensor::zeros([3, 2, 3, 3]);
        let b = Tensor::<f64>::from_f64([3], &[0.5, 0.5, 0.5]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_computed_valid_conv() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let w = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1., 1., 1., 1.]).unwrap();
        let y = conv2d_forward(&x, &w, &Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn matches_naive_with_stride_and_padding() {
        let mut rng = Rng::new(5);
        for &(s, p, h) in &[(1, 1, 5), (2, 1, 7), (2, 0, 6), (3, 2, 5)] {
            let x = rand_tensor(&[3, 2, h, h], &mut rng);
            let w = rand_tensor(&[4, 2, 3, 3], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let fast = conv2d_forward(&x, &w, &b, s, p).unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn floor_geometry_and_errors() {
        assert_eq!(output_hw(7, 7, 3, 2, 0).unwrap(), (3, 3));
        assert!(output_hw(2, 2, 5, 1, 1).is_err());
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros([1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros([1]), 1, 0).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let gy = Tensor::zeros([2, 3, 4, 4]);
        let g = conv2d_backward(&gy, &x, &w, 1, 1).unwrap();
        assert!(g.x.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.w.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_passes_gradient_through() {
        let mut rng = Rng::new(4);
        let x = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let w = Tensor::<f64>::from_f64([1, 1, 1, 1], &[1.0]).unwrap();
        let gy = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let g = conv2d_backward(&gy, &x, &w, 1, 0).unwrap();
        assert_eq!(g.x.unwrap(), gy);
    }

    #[test]
    fn result_independent_of_chunking() {
        // 19 samples span three chunks; compare with per-sample accumulation.
        let mut rng = Rng::new(11);
        let x = rand_tensor(&[19, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let gy = rand_tensor(&[19, 3, 5, 5], &mut rng);
        let full = conv2d_backward(&gy, &x, &w, 1, 1).unwrap();
        let mut acc = Tensor::<f64>::zeros([3, 2, 3, 3]);
        for b in 0..19 {
            let xs = Tensor::from_vec([1, 2, 5, 5], x.sample(b).to_vec()).unwrap();
            let gs = Tensor::from_vec([1, 3, 5, 5], gy.sample(b).to_vec()).unwrap();
            acc.add_assign(&conv2d_backward(&gs, &xs, &w, 1, 1).unwrap().w).unwrap();
        }
        for (a, e) in full.w.data().iter().zip(acc.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
