use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Matrix product of `a: [M×K]` and `b: [K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "lhs")?;
    let (k2, n) = dims2(b, "rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k, 1),
        b.data(),
        (n, 1),
        T::zero(),
        out.data_mut(),
        (n, 1),
    );
    Ok(out)
}

fn dims2<T: Scalar>(t: &Tensor<T>, side: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("matmul {side} must be 2-D, got {s:?}"))),
    }
}

/// Fully connected map `y = x·wᵀ + b` with `x: [B×in]`, `w: [out×in]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, fan_in) = dims2(x, "input")?;
    let (fan_out, w_in) = dims2(w, "weight")?;
    if w_in != fan_in || b.len() != fan_out {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::zeros([batch, fan_out]);
    for row in y.data_mut().chunks_mut(fan_out) {
        row.copy_from_slice(b.data());
    }
    T::gemm(
        batch,
        fan_in,
        fan_out,
        T::one(),
        x.data(),
        (fan_in, 1),
        w.data(),
        (1, fan_in),
        T::one(),
        y.data_mut(),
        (fan_out, 1),
    );
    Ok(y)
}

pub struct LinearGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    need_grad_x: bool,
) -> Result<LinearGrads<T>> {
    let (batch, fan_in) = dims2(x, "input")?;
    let (fan_out, _) = dims2(w, "weight")?;
    if grad_y.shape() != [batch, fan_out] {
        return Err(Error::shape(format!(
            "linear backward: grad {:?} vs expected [{batch}, {fan_out}]",
            grad_y.shape()
        )));
    }
    let mut gw = Tensor::zeros([fan_out, fan_in]);
    T::gemm(
        fan_out,
        batch,
        fan_in,
        T::one(),
        grad_y.data(),
        (1, fan_out),
        x.data(),
        (fan_in, 1),
        T::zero(),
        gw.data_mut(),
        (fan_in, 1),
    );
    let mut gb = Tensor::zeros([fan_out]);
    for row in grad_y.data().chunks(fan_out) {
        for (acc, &g) in gb.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    let gx = if need_grad_x {
        let mut gx = Tensor::zeros([batch, fan_in]);
        T::gemm(
            batch,
            fan_out,
            fan_in,
            T::one(),
            grad_y.data(),
            (fan_out, 1),
            w.data(),
            (fan_in, 1),
            T::zero(),
            gx.data_mut(),
            (fan_in, 1),
        );
        Some(gx)
    } else {
        None
    };
    Ok(LinearGrads { x: gx, w: gw, b: gb })
}
