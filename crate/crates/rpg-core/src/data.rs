//! Dataset ingestion: MNIST IDX, CIFAR-10 binary, and a seeded synthetic
//! set for smoke tests and benchmarks. Loaders normalize images to
//! per-channel mean/std computed from the training split.

use std::fs;
use std::path::Path;

use crate::detrand::RngState;
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::real::Real;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// An in-memory split: normalized CHW images plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub classes: usize,
    /// Per-channel value of a zero (black) pixel after normalization;
    /// used as the fill for crop padding.
    pub pad_value: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into an NCHW batch.
    pub fn batch<T: Real>(&self, idxs: &[usize]) -> (Tensor<T>, Vec<u8>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idxs.len() * n);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend(self.image(i).iter().map(|&v| T::from_f32(v)));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(&[idxs.len(), self.channels, self.height, self.width], data)
            .expect("batch shape consistent");
        (t, labels)
    }
}

/// Train and test splits normalized with the training statistics.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Format("idx file truncated in header".into()))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parses a raw IDX image file into (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: bad magic {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "idx images: expected {} pixel bytes, found {}",
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

/// Parses a raw IDX label file into labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: bad magic {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "idx labels: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(body)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<Vec<u8>> {
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            return read_file(&p);
        }
    }
    Err(Error::Format(format!(
        "none of {names:?} found in {}",
        dir.display()
    )))
}

/// Normalizes raw u8 pixels (CHW per image) with per-channel statistics
/// computed over the training pixels.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn normalize(
    raw_train: Vec<u8>,
    raw_test: Vec<u8>,
    channels: usize,
    hw: usize,
    labels_train: Vec<u8>,
    labels_test: Vec<u8>,
    classes: usize,
    height: usize,
    width: usize,
) -> DataBundle {
    let per_image = channels * hw;
    let n_train = raw_train.len() / per_image;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for img in 0..n_train {
        for c in 0..channels {
            let base = img * per_image + c * hw;
            for i in 0..hw {
                mean[c] += raw_train[base + i] as f64 / 255.0;
            }
        }
    }
    let denom = (n_train * hw) as f64;
    for m in &mut mean {
        *m /= denom;
    }
    for img in 0..n_train {
        for c in 0..channels {
            let base = img * per_image + c * hw;
            for i in 0..hw {
                let d = raw_train[base + i] as f64 / 255.0 - mean[c];
                var[c] += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / denom).sqrt().max(1e-6)).collect();

    let apply = |raw: &[u8]| -> Vec<f32> {
        let n = raw.len() / per_image;
        let mut out = Vec::with_capacity(raw.len());
        for img in 0..n {
            for c in 0..channels {
                let base = img * per_image + c * hw;
                for i in 0..hw {
                    out.push(((raw[base + i] as f64 / 255.0 - mean[c]) / std[c]) as f32);
                }
            }
        }
        out
    };
    let pad_value: Vec<f32> = mean
        .iter()
        .zip(&std)
        .map(|(m, s)| ((0.0 - m) / s) as f32)
        .collect();

    let mk = |images: Vec<f32>, labels: Vec<u8>| Dataset {
        images,
        channels,
        height,
        width,
        labels,
        classes,
        pad_value: pad_value.clone(),
    };
    DataBundle {
        train: mk(apply(&raw_train), labels_train),
        test: mk(apply(&raw_test), labels_test),
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: std.iter().map(|&s| s as f32).collect(),
    }
}

/// Loads the four standard MNIST IDX files from a directory.
pub fn load_mnist_idx(dir: &Path) -> Result<DataBundle> {
    let train_images =
        first_existing(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?;
    let train_labels =
        first_existing(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?;
    let test_images = first_existing(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?;
    let test_labels = first_existing(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?;

    let (n, rows, cols, train_px) = parse_idx_images(&train_images)?;
    let (nt, rt, ct, test_px) = parse_idx_images(&test_images)?;
    if (rt, ct) != (rows, cols) {
        return Err(Error::Format("mnist: train/test image sizes differ".into()));
    }
    let ltr = parse_idx_labels(&train_labels)?;
    let lte = parse_idx_labels(&test_labels)?;
    if ltr.len() != n || lte.len() != nt {
        return Err(Error::Format("mnist: image/label counts differ".into()));
    }
    if let Some(&bad) = ltr.iter().chain(lte).find(|&&l| l > 9) {
        return Err(Error::Format(format!("mnist: label {bad} out of range")));
    }
    Ok(normalize(
        train_px.to_vec(),
        test_px.to_vec(),
        1,
        rows * cols,
        ltr.to_vec(),
        lte.to_vec(),
        10,
        rows,
        cols,
    ))
}

fn parse_cifar_file(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "cifar: {} is {} bytes, not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!(
                "cifar: label {} out of range",
                rec[0]
            )));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Loads the CIFAR-10 binary batches (data_batch_1..5.bin + test_batch.bin)
/// from a directory.
pub fn load_cifar10_bin(dir: &Path) -> Result<DataBundle> {
    let mut train_labels = Vec::new();
    let mut train_px = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        let (l, px) = parse_cifar_file(&read_file(&p)?, &p)?;
        train_labels.extend(l);
        train_px.extend(px);
    }
    let p = dir.join("test_batch.bin");
    let (test_labels, test_px) = parse_cifar_file(&read_file(&p)?, &p)?;
    Ok(normalize(
        train_px,
        test_px,
        3,
        1024,
        train_labels,
        test_labels,
        10,
        32,
        32,
    ))
}

/// Seeded synthetic classification set: one Gaussian template per class
/// plus per-sample noise. Linearly separable enough for smoke tests.
pub fn synthetic(
    classes: usize,
    n_train: usize,
    n_test: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> DataBundle {
    let (c, h, w) = shape;
    let dim = c * h * w;
    let mut templates = vec![0.0f64; classes * dim];
    crate::detrand::fill_standard_normal(&mut templates, seed);

    let mut rng = RngState::new(seed.wrapping_add(1));
    let mut gen = |n: usize| -> (Vec<f32>, Vec<u8>) {
        let mut images = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % classes) as u8;
            let t = &templates[label as usize * dim..(label as usize + 1) * dim];
            for &tv in t {
                let (z, _) = crate::detrand::gaussian_pair(&mut rng);
                images.push((tv + 0.8 * z) as f32);
            }
            labels.push(label);
        }
        // Shuffle sample order so batches mix classes.
        let mut order: Vec<usize> = (0..n).collect();
        crate::detrand::shuffle(&mut order, rng.next_u64());
        let mut im2 = Vec::with_capacity(images.len());
        let mut lb2 = Vec::with_capacity(n);
        for &j in &order {
            im2.extend_from_slice(&images[j * dim..(j + 1) * dim]);
            lb2.push(labels[j]);
        }
        (im2, lb2)
    };

    let (train_images, train_labels) = gen(n_train);
    let (test_images, test_labels) = gen(n_test);
    let mk = |images: Vec<f32>, labels: Vec<u8>| Dataset {
        images,
        channels: c,
        height: h,
        width: w,
        labels,
        classes,
        pad_value: vec![0.0; c],
    };
    DataBundle {
        train: mk(train_images, train_labels),
        test: mk(test_images, test_labels),
        mean: vec![0.0; c],
        std: vec![1.0; c],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: usize, rows: usize, cols: usize, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(n as u32).to_be_bytes());
        b.extend_from_slice(&(rows as u32).to_be_bytes());
        b.extend_from_slice(&(cols as u32).to_be_bytes());
        b.extend(std::iter::repeat_n(fill, n * rows * cols));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let ok = idx_images(3, 4, 4, 128);
        let (n, r, c, px) = parse_idx_images(&ok).unwrap();
        assert_eq!((n, r, c, px.len()), (3, 4, 4, 48));

        let mut bad_magic = ok.clone();
        bad_magic[2] = 9;
        assert!(matches!(
            parse_idx_images(&bad_magic),
            Err(Error::Format(_))
        ));

        let truncated = &ok[..ok.len() - 5];
        assert!(matches!(parse_idx_images(truncated), Err(Error::Format(_))));

        let lbl = idx_labels(&[1, 2, 3]);
        assert_eq!(parse_idx_labels(&lbl).unwrap(), &[1, 2, 3]);
        assert!(parse_idx_labels(&lbl[..9]).is_err());
    }

    #[test]
    fn mnist_loader_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, bytes: &[u8]| {
            let mut f = std::fs::File::create(dir.path().join(name)).unwrap();
            f.write_all(bytes).unwrap();
        };
        // Vary pixel values so std is nonzero.
        let mut imgs = idx_images(4, 28, 28, 0);
        for (i, b) in imgs.iter_mut().skip(16).enumerate() {
            *b = (i % 251) as u8;
        }
        write("train-images-idx3-ubyte", &imgs);
        write("train-labels-idx1-ubyte", &idx_labels(&[0, 1, 2, 3]));
        write("t10k-images-idx3-ubyte", &imgs);
        write("t10k-labels-idx1-ubyte", &idx_labels(&[3, 2, 1, 0]));

        let bundle = load_mnist_idx(dir.path()).unwrap();
        assert_eq!(bundle.train.len(), 4);
        assert_eq!(bundle.train.image_len(), 784);
        // Training pixels are standardized.
        let n = bundle.train.images.len() as f64;
        let mean: f64 = bundle.train.images.iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn cifar_loader_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let record = |label: u8, fill: u8| {
            let mut r = vec![label];
            r.extend(std::iter::repeat_n(fill, 3072));
            r
        };
        for i in 1..=5 {
            let mut f =
                std::fs::File::create(dir.path().join(format!("data_batch_{i}.bin"))).unwrap();
            // Two records per batch with differing fills.
            f.write_all(&record((i % 10) as u8, 10 * i as u8)).unwrap();
            f.write_all(&record(0, 200)).unwrap();
        }
        let mut f = std::fs::File::create(dir.path().join("test_batch.bin")).unwrap();
        f.write_all(&record(9, 66)).unwrap();

        let bundle = load_cifar10_bin(dir.path()).unwrap();
        assert_eq!(bundle.train.len(), 10);
        assert_eq!(bundle.test.len(), 1);
        assert_eq!(bundle.train.channels, 3);
        assert_eq!(bundle.test.labels, vec![9]);
    }

    #[test]
    fn cifar_rejects_bad_record_size() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), [0u8; 3073]).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), [0u8; 3000]).unwrap();
        assert!(matches!(
            load_cifar10_bin(dir.path()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn cifar_rejects_bad_label() {
        let mut rec = vec![11u8];
        rec.extend([0u8; 3072]);
        assert!(parse_cifar_file(&rec, Path::new("x")).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic(4, 32, 8, (1, 6, 6), 99);
        let b = synthetic(4, 32, 8, (1, 6, 6), 99);
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.train.labels, b.train.labels);
        for cls in 0..4u8 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == cls).count(), 8);
        }
    }

    #[test]
    fn batch_stacks_samples() {
        let d = synthetic(2, 6, 2, (1, 3, 3), 1);
        let (x, y) = d.train.batch::<f32>(&[0, 3, 5]);
        assert_eq!(x.shape, [3, 1, 3, 3]);
        assert_eq!(y.len(), 3);
        assert_eq!(&x.data[..9], d.train.image(0));
    }
}
