//! Per-channel batch normalization with explicit backward.
//!
//! Ring-generated layers never cover these parameters: every normalized
//! layer owns its gamma/beta and running statistics.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::real::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Learnable parameters and running statistics for one normalized layer.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch statistics saved by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    /// Biased (1/m) variance used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance for the running-stat update.
    pub var_unbiased: Vec<T>,
}

fn channel_extent<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    // Accepts NCHW or NC layouts; per-channel stats pool everything else.
    match x.shape[..] {
        [n, c, h, w] => Ok((n, c, h * w)),
        [n, c] => Ok((n, c, 1)),
        _ => Err(Error::Shape(format!(
            "batchnorm expects NCHW or NC input, got {:?}",
            x.shape
        ))),
    }
}

/// Train-mode forward: normalize by batch statistics. Running stats are NOT
/// touched here; the caller applies [`update_running_stats`] once per
/// optimizer step so that pure evaluations (gradient checks) stay
/// side-effect free.
pub fn forward_train<T: Real>(bn: &BatchNorm<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = channel_extent(x)?;
    if c != bn.channels() {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {c}",
            bn.channels()
        )));
    }
    let m = n * hw;
    if m == 0 {
        return Err(Error::InvalidArgument("batchnorm: empty batch".into()));
    }
    let minv = T::from_f64(1.0 / m as f64);
    let eps = T::from_f64(BN_EPS);

    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut sum = T::ZERO;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                sum += x.data[base + i];
            }
        }
        let mu = sum * minv;
        let mut sq = T::ZERO;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let d = x.data[base + i] - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq * minv;
    }

    let mut out = Tensor::zeros(&x.shape);
    for ch in 0..c {
        let inv_std = T::ONE / (var[ch] + eps).sqrt();
        let g = bn.gamma[ch];
        let beta = bn.beta[ch];
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                out.data[base + i] = (x.data[base + i] - mean[ch]) * inv_std * g + beta;
            }
        }
    }

    let bessel = if m > 1 {
        T::from_f64(m as f64 / (m as f64 - 1.0))
    } else {
        T::ONE
    };
    let var_unbiased = var.iter().map(|&v| v * bessel).collect();
    Ok((
        out,
        BnCache {
            mean,
            var,
            var_unbiased,
        },
    ))
}

/// Eval-mode forward: normalize by running statistics.
pub fn forward_eval<T: Real>(bn: &BatchNorm<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, hw) = channel_extent(x)?;
    if c != bn.channels() {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {c}",
            bn.channels()
        )));
    }
    let eps = T::from_f64(BN_EPS);
    let mut out = Tensor::zeros(&x.shape);
    for ch in 0..c {
        let inv_std = T::ONE / (bn.running_var[ch] + eps).sqrt();
        let g = bn.gamma[ch];
        let beta = bn.beta[ch];
        let mu = bn.running_mean[ch];
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                out.data[base + i] = (x.data[base + i] - mu) * inv_std * g + beta;
            }
        }
    }
    Ok(out)
}

/// Folds a step's batch statistics into the running estimates with momentum.
pub fn update_running_stats<T: Real>(bn: &mut BatchNorm<T>, cache: &BnCache<T>) {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::from_f64(1.0 - BN_MOMENTUM);
    for ch in 0..bn.channels() {
        bn.running_mean[ch] = keep * bn.running_mean[ch] + m * cache.mean[ch];
        bn.running_var[ch] = keep * bn.running_var[ch] + m * cache.var_unbiased[ch];
    }
}

/// Backward through train-mode normalization. Returns (grad_x, grad_gamma,
/// grad_beta).
pub fn backward<T: Real>(
    bn: &BatchNorm<T>,
    x: &Tensor<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, hw) = channel_extent(x)?;
    if grad_out.shape != x.shape {
        return Err(Error::Shape(format!(
            "batchnorm backward: grad shape {:?} != input shape {:?}",
            grad_out.shape, x.shape
        )));
    }
    let m = n * hw;
    let minv = T::from_f64(1.0 / m as f64);
    let eps = T::from_f64(BN_EPS);

    let mut grad_x = Tensor::zeros(&x.shape);
    let mut grad_gamma = vec![T::ZERO; c];
    let mut grad_beta = vec![T::ZERO; c];

    for ch in 0..c {
        let inv_std = T::ONE / (cache.var[ch] + eps).sqrt();
        let mu = cache.mean[ch];

        // Channel sums: sum(gy), sum(gy * xhat).
        let mut sum_gy = T::ZERO;
        let mut sum_gy_xhat = T::ZERO;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let gy = grad_out.data[base + i];
                let xhat = (x.data[base + i] - mu) * inv_std;
                sum_gy += gy;
                sum_gy_xhat += gy * xhat;
            }
        }
        grad_beta[ch] = sum_gy;
        grad_gamma[ch] = sum_gy_xhat;

        let g = bn.gamma[ch];
        let mean_gy = sum_gy * minv;
        let mean_gy_xhat = sum_gy_xhat * minv;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let gy = grad_out.data[base + i];
                let xhat = (x.data[base + i] - mu) * inv_std;
                grad_x.data[base + i] = g * inv_std * (gy - mean_gy - xhat * mean_gy_xhat);
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}
