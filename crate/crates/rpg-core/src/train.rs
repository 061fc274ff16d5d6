//! SGD training loop with momentum, weight decay, a step schedule,
//! evaluation, and magnitude pruning of rings.
//!
//! Weight decay applies to ring values directly (one decay per stored
//! element, however many layers reuse it), to direct kernels, and to batch
//! norm weights; never to biases.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detrand::{self, RngState};
use crate::error::{Error, Result};
use crate::model::{Mode, Network};
use crate::nn::batchnorm;
use crate::nn::loss::{count_correct, softmax_cross_entropy};
use crate::nn::tensor::Tensor;
use crate::real::Real;
use crate::ring::ParameterRing;

const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
    /// Pad-4 random crop + horizontal flip on training batches.
    pub augment: bool,
    /// Include batch-norm weights in the reported backbone count.
    pub count_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 200,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_gamma: 0.1,
            lr_milestones: vec![60, 120, 160],
            seed: 0,
            augment: false,
            count_bn: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("train: lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train: momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch size must be >= 1".into()));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "train: milestones must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch's metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub backbone_params: usize,
    pub total_params: usize,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,val_acc,lr,backbone_params,total_params";

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            self.val_acc,
            self.lr,
            self.backbone_params,
            self.total_params
        )
    }
}

/// Step schedule: `lr0 * gamma^(milestones <= epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let hits = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_gamma.powi(hits as i32)
}

/// One momentum-SGD update: `v <- m*v + g + wd*p; p <- p - lr*v`.
/// Pass `wd = 0` for parameters exempt from decay.
pub fn sgd_update<T: Real>(p: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, wd: f64) {
    debug_assert!(p.len() == g.len() && p.len() == v.len());
    let lr = T::from_f64(lr);
    let m = T::from_f64(momentum);
    let wd = T::from_f64(wd);
    for i in 0..p.len() {
        v[i] = m * v[i] + g[i] + wd * p[i];
        p[i] -= lr * v[i];
    }
}

/// Momentum buffers mirroring every trainable parameter store.
#[derive(Clone)]
pub struct OptState<T> {
    ring_v: Vec<Vec<T>>,
    direct_v: Vec<Option<Vec<T>>>,
    bias_v: Vec<Option<Vec<T>>>,
    bn_gamma_v: Vec<Option<Vec<T>>>,
    bn_beta_v: Vec<Option<Vec<T>>>,
}

impl<T: Real> OptState<T> {
    pub fn new(net: &Network<T>) -> Self {
        Self {
            ring_v: net.rings.iter().map(|r| vec![T::ZERO; r.size()]).collect(),
            direct_v: net
                .direct
                .iter()
                .map(|d| d.as_ref().map(|t| vec![T::ZERO; t.numel()]))
                .collect(),
            bias_v: net
                .bias
                .iter()
                .map(|b| b.as_ref().map(|v| vec![T::ZERO; v.len()]))
                .collect(),
            bn_gamma_v: net
                .bn
                .iter()
                .map(|b| b.as_ref().map(|bn| vec![T::ZERO; bn.gamma.len()]))
                .collect(),
            bn_beta_v: net
                .bn
                .iter()
                .map(|b| b.as_ref().map(|bn| vec![T::ZERO; bn.beta.len()]))
                .collect(),
        }
    }
}

/// Per-ring masks of pruned (persistently zero) elements.
pub type PruneMasks = Vec<Vec<bool>>;

fn apply_masks<T: Real>(net: &mut Network<T>, masks: &PruneMasks) {
    for (ring, mask) in net.rings.iter_mut().zip(masks) {
        for (w, &dead) in ring.values.iter_mut().zip(mask) {
            if dead {
                *w = T::ZERO;
            }
        }
    }
}

/// Forward, loss, backward, superposed scatter, SGD update, running-stat
/// update, prune-mask reapplication. Returns (mean batch loss, correct).
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    opt: &mut OptState<T>,
    x: &Tensor<T>,
    labels: &[u8],
    lr: f64,
    cfg: &TrainConfig,
    masks: Option<&PruneMasks>,
) -> Result<(f64, usize)> {
    let fp = net.forward(x, Mode::Train)?;
    let (loss, grad_logits) = softmax_cross_entropy(fp.logits(), labels)?;
    let correct = count_correct(fp.logits(), labels);
    let bw = net.backward(&fp, grad_logits)?;
    drop(fp);

    // Ring gradients accumulate fresh each step, in declaration order.
    let ring_grads = net.ring_gradients(&bw.kernel_grads)?;
    for (r, grad) in ring_grads.iter().enumerate() {
        sgd_update(
            &mut net.rings[r].values,
            grad,
            &mut opt.ring_v[r],
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
    }

    for node in 0..net.config.nodes.len() {
        if let (Some(kernel), Some(grad)) = (&mut net.direct[node], &bw.kernel_grads[node]) {
            sgd_update(
                &mut kernel.data,
                grad,
                opt.direct_v[node].as_mut().unwrap(),
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
        if let (Some(bias), Some(grad)) = (&mut net.bias[node], &bw.bias_grads[node]) {
            sgd_update(
                bias,
                grad,
                opt.bias_v[node].as_mut().unwrap(),
                lr,
                cfg.momentum,
                0.0,
            );
        }
        if let (Some(bn), Some((gg, gb))) = (&mut net.bn[node], &bw.bn_grads[node]) {
            sgd_update(
                &mut bn.gamma,
                gg,
                opt.bn_gamma_v[node].as_mut().unwrap(),
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            sgd_update(
                &mut bn.beta,
                gb,
                opt.bn_beta_v[node].as_mut().unwrap(),
                lr,
                cfg.momentum,
                0.0,
            );
        }
        if let (Some(bn), Some(stats)) = (&mut net.bn[node], &bw.bn_stats[node]) {
            batchnorm::update_running_stats(bn, stats);
        }
    }

    if let Some(masks) = masks {
        apply_masks(net, masks);
    }
    Ok((loss, correct))
}

/// Pad-4 random crop + horizontal flip, drawing (flip, dy, dx) per sample
/// from the training stream in sample order.
fn augmented_batch<T: Real>(
    ds: &Dataset,
    idxs: &[usize],
    rng: &mut RngState,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let span = (2 * CROP_PAD + 1) as u64;
    let mut data = Vec::with_capacity(idxs.len() * ds.image_len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let flip = rng.bounded(2)? == 1;
        let dy = rng.bounded(span)? as isize - CROP_PAD as isize;
        let dx = rng.bounded(span)? as isize - CROP_PAD as isize;
        let img = ds.image(i);
        for ch in 0..c {
            let pad = T::from_f32(ds.pad_value[ch]);
            let plane = &img[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let src_x = if flip { w - 1 - x } else { x };
                    let sy = y as isize + dy;
                    let sx = src_x as isize + dx;
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        T::from_f32(plane[sy as usize * w + sx as usize])
                    } else {
                        pad
                    };
                    data.push(v);
                }
            }
        }
        labels.push(ds.labels[i]);
    }
    Ok((Tensor::from_vec(&[idxs.len(), c, h, w], data)?, labels))
}

/// Eval-mode accuracy over a whole split.
pub fn evaluate<T: Real>(net: &Network<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch::<T>(chunk);
        let fp = net.forward(&x, Mode::Eval)?;
        correct += count_correct(fp.logits(), &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Epoch loop: seeded shuffle, optional augmentation, step, per-epoch
/// evaluation. Emits one record per epoch through `on_epoch` and returns
/// them all. A non-finite loss aborts with a divergence error after the
/// diagnostic record is emitted.
pub fn train_model<T: Real>(
    net: &mut Network<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    masks: Option<&PruneMasks>,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("train: empty training split".into()));
    }
    let mut opt = OptState::new(net);
    let mut rng = RngState::new(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        detrand::shuffle(&mut order, rng.next_u64());

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = if cfg.augment {
                augmented_batch::<T>(train, chunk, &mut rng)?
            } else {
                train.batch::<T>(chunk)
            };
            let (loss, c) = train_step(net, &mut opt, &x, &labels, lr, cfg, masks)?;
            if !loss.is_finite() {
                let diag = TrainRecord {
                    epoch,
                    train_loss: loss,
                    train_acc: 0.0,
                    val_acc: 0.0,
                    lr,
                    backbone_params: net.backbone_params(cfg.count_bn),
                    total_params: net.total_params(),
                };
                on_epoch(&diag);
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }

        let record = TrainRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc: evaluate(net, test, cfg.batch_size.max(256))?,
            lr,
            backbone_params: net.backbone_params(cfg.count_bn),
            total_params: net.total_params(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

/// Zeroes the `floor(p * N)` smallest-magnitude ring elements (ties break
/// toward the lower index) and returns the persistent mask.
pub fn prune_ring<T: Real>(ring: &mut ParameterRing<T>, fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "prune: fraction {fraction} outside [0, 1)"
        )));
    }
    let n = ring.size();
    let k = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        ring.values[a]
            .abs()
            .to_f64()
            .total_cmp(&ring.values[b].abs().to_f64())
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        ring.values[i] = T::ZERO;
        mask[i] = true;
    }
    Ok(mask)
}

/// Prunes every ring of a network at the same fraction.
pub fn prune_network<T: Real>(net: &mut Network<T>, fraction: f64) -> Result<PruneMasks> {
    net.rings
        .iter_mut()
        .map(|r| prune_ring(r, fraction))
        .collect()
}
