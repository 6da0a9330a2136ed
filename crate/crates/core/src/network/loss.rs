use crate::error::{Error, Result};
use crate::hoyer::hoyer_square;
use crate::network::model::{check_labels, ForwardTrace};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `total = ce + lambda_h·hoyer`, where `hoyer` is the unweighted sum over
/// spike-layer inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub hoyer: f64,
    pub lambda_h: f64,
}

/// Mean softmax cross-entropy, evaluated in double precision.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let [b, k] = *logits.shape() else {
        return Err(Error::shape(format!("logits must be [B, K], got {:?}", logits.shape())));
    };
    check_labels(labels, b, k)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / b as f64)
}

pub fn total_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    trace: &ForwardTrace<T>,
    lambda_h: f64,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, labels)?;
    let hoyer: f64 = trace.regularized_potentials().into_iter().map(hoyer_square).sum();
    Ok(LossBreakdown {
        total: ce + lambda_h * hoyer,
        ce,
        hoyer,
        lambda_h,
    })
}
