//! Mean softmax cross-entropy over a batch, numerically stabilized by
//! max subtraction.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::real::Real;

/// Returns (mean loss, grad wrt logits). The gradient is
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<(f64, Tensor<T>)> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "loss: {} labels for batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("loss: empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!(
            "loss: label {bad} out of range [0, {classes})"
        )));
    }

    let batch_inv = T::from_f64(1.0 / n as f64);
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut total = 0.0f64;
    for (b, &raw_label) in labels.iter().enumerate() {
        let row = &logits.data[b * classes..(b + 1) * classes];
        let mut max = row[0];
        for &v in &row[1..] {
            max = max.max(v);
        }
        let mut denom = T::ZERO;
        for &v in row {
            denom += (v - max).exp();
        }
        let label = raw_label as usize;
        let log_denom = denom.ln();
        total += (log_denom - (row[label] - max)).to_f64();
        let grow = &mut grad.data[b * classes..(b + 1) * classes];
        for (c, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            let delta = if c == label { T::ONE } else { T::ZERO };
            grow[c] = (p - delta) * batch_inv;
        }
    }
    Ok((total / n as f64, grad))
}

/// Count of argmax predictions equal to the labels.
pub fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> usize {
    let (n, classes) = match logits.dims2() {
        Ok(d) => d,
        Err(_) => return 0,
    };
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate().take(n) {
        let row = &logits.data[b * classes..(b + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    correct
}
