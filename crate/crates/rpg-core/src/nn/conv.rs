//! 2-d cross-correlation (NCHW, zero padding) with explicit backward.
//!
//! Forward parallelizes over (batch, out-channel) planes and backward over
//! disjoint gradient regions, so parallel results are bit-identical to the
//! sequential path.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::par;
use crate::real::Real;

pub fn out_spatial(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn check_shapes<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, kc, kh, kw) = kernel.dims4()?;
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv2d: kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be >= 1".into()));
    }
    Ok((n, c_in, h, w, c_out, kh, kw))
}

/// `y[n, co, oh, ow] = sum_ci sum_kh sum_kw x[n, ci, oh*s - p + kh, ow*s - p + kw] * k[co, ci, kh, kw]`
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c_in, h, w, c_out, kh, kw) = check_shapes(x, kernel, stride)?;
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"
        )));
    }
    let oh = out_spatial(h, kh, stride, padding);
    let ow = out_spatial(w, kw, stride, padding);

    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    let plane = oh * ow;
    let xin = &x.data;
    let kd = &kernel.data;

    par::for_each_chunk_mut(&mut out.data, plane, |chunk_idx, out_plane| {
        let b = chunk_idx / c_out;
        let co = chunk_idx % c_out;
        let x_base = b * c_in * h * w;
        let k_base = co * c_in * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for ci in 0..c_in {
                    let x_ch = x_base + ci * h * w;
                    let k_ch = k_base + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_ch + iy as usize * w;
                        let k_row = k_ch + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xin[x_row + ix as usize] * kd[k_row + kx];
                        }
                    }
                }
                out_plane[oy * ow + ox] = acc;
            }
        }
    });
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to the input and the
/// kernel.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c_in, h, w, c_out, kh, kw) = check_shapes(x, kernel, stride)?;
    let oh = out_spatial(h, kh, stride, padding);
    let ow = out_spatial(w, kw, stride, padding);
    let (gn, gc, gh, gw) = grad_out.dims4()?;
    if (gn, gc, gh, gw) != (n, c_out, oh, ow) {
        return Err(Error::Shape(format!(
            "conv2d backward: grad_out shape {:?} does not match output [{n}, {c_out}, {oh}, {ow}]",
            grad_out.shape
        )));
    }

    let xin = &x.data;
    let kd = &kernel.data;
    let gd = &grad_out.data;

    // grad_x: each sample's gradient is a disjoint region.
    let mut grad_x = Tensor::zeros(&[n, c_in, h, w]);
    par::for_each_chunk_mut(&mut grad_x.data, c_in * h * w, |b, gx| {
        for co in 0..c_out {
            let g_plane = (b * c_out + co) * oh * ow;
            let k_base = co * c_in * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gd[g_plane + oy * ow + ox];
                    for ci in 0..c_in {
                        let gx_ch = ci * h * w;
                        let k_ch = k_base + ci * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[gx_ch + iy as usize * w + ix as usize] +=
                                    g * kd[k_ch + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    });

    // grad_k: each out-channel slice is disjoint; batch is summed in fixed
    // index order inside the slice.
    let mut grad_k = Tensor::zeros(&[c_out, c_in, kh, kw]);
    par::for_each_chunk_mut(&mut grad_k.data, c_in * kh * kw, |co, gk| {
        for b in 0..n {
            let g_plane = (b * c_out + co) * oh * ow;
            let x_base = b * c_in * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gd[g_plane + oy * ow + ox];
                    for ci in 0..c_in {
                        let x_ch = x_base + ci * h * w;
                        let gk_ch = ci * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_ch + iy as usize * w;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gk[gk_ch + ky * kw + kx] += g * xin[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });

    Ok((grad_x, grad_k))
}
