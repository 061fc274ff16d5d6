//! Shape-preserving and pooling ops: relu, max/avg pooling, residual add,
//! flatten. Forward + explicit backward for each.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::real::Real;

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(T::ZERO)).collect(),
    }
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape != grad_out.shape {
        return Err(Error::Shape("relu backward: shape mismatch".into()));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
            .collect(),
    })
}

fn pool_out<T: Real>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if size == 0 || stride == 0 || size > h || size > w {
        return Err(Error::Shape(format!(
            "pool: window {size} stride {stride} invalid for {h}x{w} input"
        )));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    Ok((n, c, h, w, oh, ow))
}

/// Max pooling; ties resolve to the first element in scan order, recorded
/// for the backward pass.
pub fn maxpool_forward<T: Real>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w, oh, ow) = pool_out(x, size, stride)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x.data[best_idx];
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * oh * ow + oy * ow + ox;
                out.data[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(
    x: &Tensor<T>,
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::Shape("maxpool backward: argmax mismatch".into()));
    }
    let mut grad_x = Tensor::zeros(&x.shape);
    for (o, &src) in argmax.iter().enumerate() {
        grad_x.data[src as usize] += grad_out.data[o];
    }
    Ok(grad_x)
}

pub fn avgpool_forward<T: Real>(x: &Tensor<T>, size: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pool_out(x, size, stride)?;
    let inv = T::from_f64(1.0 / (size * size) as f64);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for ky in 0..size {
                    for kx in 0..size {
                        acc += x.data[base + (oy * stride + ky) * w + (ox * stride + kx)];
                    }
                }
                out.data[nc * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward<T: Real>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pool_out(x, size, stride)?;
    if grad_out.shape != [n, c, oh, ow] {
        return Err(Error::Shape("avgpool backward: grad shape mismatch".into()));
    }
    let inv = T::from_f64(1.0 / (size * size) as f64);
    let mut grad_x = Tensor::zeros(&x.shape);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data[nc * oh * ow + oy * ow + ox] * inv;
                for ky in 0..size {
                    for kx in 0..size {
                        grad_x.data[base + (oy * stride + ky) * w + (ox * stride + kx)] += g;
                    }
                }
            }
        }
    }
    Ok(grad_x)
}

/// Elementwise sum of two equal-shape tensors. Downsampling mismatches are
/// handled upstream by a strided projection in the block config.
pub fn residual_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "residual add: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn flatten<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    x.reshaped(&[n, c * h * w])
}
