//! Fully connected layer. Weight layout is [out, in] row-major; the flat
//! kernel vector a ring generates reshapes into that layout.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::real::Real;

/// `y[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`
pub fn dense_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let (n, in_f) = x.dims2()?;
    let out_f = bias.len();
    if weight.len() != in_f * out_f {
        return Err(Error::Shape(format!(
            "dense: weight length {} != {out_f} x {in_f}",
            weight.len()
        )));
    }
    let mut out = Tensor::zeros(&[n, out_f]);
    for b in 0..n {
        let x_row = &x.data[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let w_row = &weight[o * in_f..(o + 1) * in_f];
            let mut acc = bias[o];
            for i in 0..in_f {
                acc += x_row[i] * w_row[i];
            }
            out.data[b * out_f + o] = acc;
        }
    }
    Ok(out)
}

/// Returns (grad_x, grad_weight, grad_bias).
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, in_f) = x.dims2()?;
    let (gn, out_f) = grad_out.dims2()?;
    if gn != n || weight.len() != in_f * out_f {
        return Err(Error::Shape("dense backward: inconsistent shapes".into()));
    }
    let mut grad_x = Tensor::zeros(&[n, in_f]);
    let mut grad_w = vec![T::ZERO; in_f * out_f];
    let mut grad_b = vec![T::ZERO; out_f];
    for b in 0..n {
        let x_row = &x.data[b * in_f..(b + 1) * in_f];
        let g_row = &grad_out.data[b * out_f..(b + 1) * out_f];
        let gx_row = &mut grad_x.data[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let g = g_row[o];
            grad_b[o] += g;
            let w_row = &weight[o * in_f..(o + 1) * in_f];
            let gw_row = &mut grad_w[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                gx_row[i] += g * w_row[i];
                gw_row[i] += g * x_row[i];
            }
        }
    }
    Ok((grad_x, grad_w, grad_b))
}
