//! Monte Carlo verification of the destructive-sharing propositions
//! (inner products of a vector pushed through independent random orthogonal
//! transforms), feature-similarity histograms, and power-law fitting.

use crate::detrand::{self, RngState};
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::par;
use crate::real::Real;

/// Transform family used for the proposition trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ensemble {
    /// Dense orthogonal matrices from the Haar distribution.
    Haar,
    /// Index permutation composed with elementwise sign reflection — the
    /// subgroup the generators actually use.
    PermSign,
}

impl std::fmt::Display for Ensemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ensemble::Haar => write!(f, "haar"),
            Ensemble::PermSign => write!(f, "perm-sign"),
        }
    }
}

/// Monte Carlo statistics for one (dimension, ensemble) cell.
#[derive(Debug, Clone)]
pub struct PropStats {
    pub m: usize,
    pub trials: usize,
    pub mean_inner: f64,
    pub std_inner: f64,
    pub mean_cos2: f64,
    pub std_cos2: f64,
}

impl PropStats {
    pub fn stderr_inner(&self) -> f64 {
        self.std_inner / (self.trials as f64).sqrt()
    }

    pub fn stderr_cos2(&self) -> f64 {
        self.std_cos2 / (self.trials as f64).sqrt()
    }

    /// Expectation of the inner product is zero.
    pub fn prop1_pass(&self) -> bool {
        self.mean_inner.abs() <= 3.0 * self.stderr_inner()
    }

    pub fn cos2_expected(&self) -> f64 {
        1.0 / self.m as f64
    }

    /// Expectation of the squared normalized inner product is 1/M.
    pub fn prop2_pass(&self) -> bool {
        (self.mean_cos2 - self.cos2_expected()).abs()
            < 0.05 / self.m as f64 + 3.0 * self.stderr_cos2()
    }
}

/// A Haar-distributed orthogonal transform in factored form: the
/// Householder reflectors of the QR factorization of an i.i.d. Gaussian
/// matrix, plus the R-diagonal sign correction. Applying the factors costs
/// O(M^2) per vector; the trials never materialize the matrix.
pub(crate) struct HaarFactor {
    m: usize,
    /// Reflector k occupies rows k..m; stored with its squared norm.
    reflectors: Vec<(Vec<f64>, f64)>,
    /// sign(R_jj) per column.
    signs: Vec<f64>,
}

impl HaarFactor {
    pub(crate) fn sample(m: usize, seed: u64) -> Self {
        assert!(m >= 1, "dimension must be >= 1");
        // Column-major scratch: column j occupies a[j*m..(j+1)*m].
        let mut a = vec![0.0f64; m * m];
        {
            // Fill in row-major draw order so the stream layout is
            // independent of this storage choice.
            let mut buf = vec![0.0f64; m * m];
            detrand::fill_standard_normal(&mut buf, seed);
            for r in 0..m {
                for c in 0..m {
                    a[c * m + r] = buf[r * m + c];
                }
            }
        }

        let mut reflectors = Vec::with_capacity(m);
        let mut signs = vec![1.0f64; m];
        for k in 0..m {
            let col = &a[k * m..(k + 1) * m];
            let norm2: f64 = col[k..].iter().map(|x| x * x).sum();
            let norm = norm2.sqrt();
            if norm == 0.0 {
                reflectors.push((vec![0.0; m - k], 0.0));
                continue;
            }
            let alpha = if col[k] >= 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = col[k..].to_vec();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                reflectors.push((v, 0.0));
                signs[k] = if alpha >= 0.0 { 1.0 } else { -1.0 };
                continue;
            }
            for j in k..m {
                let col = &mut a[j * m + k..(j + 1) * m];
                let mut dot = 0.0;
                for i in 0..col.len() {
                    dot += v[i] * col[i];
                }
                let coef = 2.0 * dot / vnorm2;
                for i in 0..col.len() {
                    col[i] -= coef * v[i];
                }
            }
            signs[k] = if a[k * m + k] >= 0.0 { 1.0 } else { -1.0 };
            reflectors.push((v, vnorm2));
        }
        Self {
            m,
            reflectors,
            signs,
        }
    }

    /// out = Q D f, with Q = H_0 ... H_{m-1} and D the sign correction.
    pub(crate) fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.m);
        for i in 0..self.m {
            out[i] = f[i] * self.signs[i];
        }
        for k in (0..self.m).rev() {
            let (v, vnorm2) = &self.reflectors[k];
            if *vnorm2 == 0.0 {
                continue;
            }
            let tail = &mut out[k..];
            let mut dot = 0.0;
            for i in 0..v.len() {
                dot += v[i] * tail[i];
            }
            let coef = 2.0 * dot / vnorm2;
            for i in 0..v.len() {
                tail[i] -= coef * v[i];
            }
        }
    }
}

/// Samples an M x M orthogonal matrix (row-major) from the Haar
/// distribution: QR of an i.i.d. Gaussian matrix with the R-diagonal sign
/// correction. Householder reflections, no Gram-Schmidt.
pub fn sample_haar_orthogonal(m: usize, seed: u64) -> Vec<f64> {
    let factor = HaarFactor::sample(m, seed);
    let mut q = vec![0.0f64; m * m];
    let mut basis = vec![0.0f64; m];
    let mut col = vec![0.0f64; m];
    for j in 0..m {
        basis[j] = 1.0;
        factor.apply_into(&basis, &mut col);
        basis[j] = 0.0;
        for i in 0..m {
            q[i * m + j] = col[i];
        }
    }
    q
}

fn apply_perm_sign(f: &[f64], rng: &mut RngState, out: &mut [f64]) {
    let m = f.len();
    let mut perm: Vec<u32> = (0..m as u32).collect();
    detrand::shuffle(&mut perm, rng.next_u64());
    let signs = detrand::signs(rng.next_u64(), m);
    for k in 0..m {
        let v = f[perm[k] as usize];
        out[k] = if signs[k] < 0 { -v } else { v };
    }
}

/// Unit vector drawn from a seeded Gaussian.
fn random_unit(m: usize, seed: u64) -> Vec<f64> {
    let mut f = vec![0.0f64; m];
    detrand::fill_standard_normal(&mut f, seed);
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        f[0] = 1.0;
    } else {
        for v in &mut f {
            *v /= norm;
        }
    }
    f
}

#[derive(Clone, Copy, Default)]
struct TrialSums {
    n: usize,
    sum_inner: f64,
    sumsq_inner: f64,
    sum_cos2: f64,
    sumsq_cos2: f64,
}

const TRIALS_PER_SHARD: usize = 256;

/// Draws a fixed unit vector, then for each trial pushes it through two
/// independently sampled transforms and records the inner product and the
/// squared normalized inner product. Trials are sharded with sub-seeds and
/// merged in shard order, so the result is independent of thread count.
/// Both proposition checks read different fields of the same trial stream.
pub fn verify_props(m: usize, trials: usize, ensemble: Ensemble, seed: u64) -> PropStats {
    run_prop_trials(m, trials, ensemble, seed)
}

fn run_prop_trials(m: usize, trials: usize, ensemble: Ensemble, seed: u64) -> PropStats {
    assert!(m >= 1 && trials >= 1);
    let mut parent = RngState::new(seed);
    let f = random_unit(m, parent.next_u64());
    let shards = trials.div_ceil(TRIALS_PER_SHARD);
    let shard_seeds: Vec<u64> = (0..shards).map(|_| parent.next_u64()).collect();

    let sums: Vec<TrialSums> = par::map_collect(shards, |s| {
        let mut rng = RngState::new(shard_seeds[s]);
        let count = TRIALS_PER_SHARD.min(trials - s * TRIALS_PER_SHARD);
        let mut acc = TrialSums::default();
        let mut yi = vec![0.0f64; m];
        let mut yj = vec![0.0f64; m];
        for _ in 0..count {
            match ensemble {
                Ensemble::Haar => {
                    HaarFactor::sample(m, rng.next_u64()).apply_into(&f, &mut yi);
                    HaarFactor::sample(m, rng.next_u64()).apply_into(&f, &mut yj);
                }
                Ensemble::PermSign => {
                    apply_perm_sign(&f, &mut rng, &mut yi);
                    apply_perm_sign(&f, &mut rng, &mut yj);
                }
            }
            let inner: f64 = yi.iter().zip(&yj).map(|(a, b)| a * b).sum();
            let ni: f64 = yi.iter().map(|v| v * v).sum();
            let nj: f64 = yj.iter().map(|v| v * v).sum();
            let cos2 = inner * inner / (ni * nj);
            acc.n += 1;
            acc.sum_inner += inner;
            acc.sumsq_inner += inner * inner;
            acc.sum_cos2 += cos2;
            acc.sumsq_cos2 += cos2 * cos2;
        }
        acc
    });

    let mut total = TrialSums::default();
    for s in sums {
        total.n += s.n;
        total.sum_inner += s.sum_inner;
        total.sumsq_inner += s.sumsq_inner;
        total.sum_cos2 += s.sum_cos2;
        total.sumsq_cos2 += s.sumsq_cos2;
    }
    let n = total.n as f64;
    let mean_inner = total.sum_inner / n;
    let mean_cos2 = total.sum_cos2 / n;
    let var = |sumsq: f64, mean: f64| {
        if total.n > 1 {
            ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        }
    };
    PropStats {
        m,
        trials: total.n,
        mean_inner,
        std_inner: var(total.sumsq_inner, mean_inner).sqrt(),
        mean_cos2,
        std_cos2: var(total.sumsq_cos2, mean_cos2).sqrt(),
    }
}

/// E[<A_i f, A_j f>] = 0 for independent transforms.
pub fn verify_prop1(m: usize, trials: usize, ensemble: Ensemble, seed: u64) -> PropStats {
    run_prop_trials(m, trials, ensemble, seed)
}

/// E[cos^2(A_i f, A_j f)] = 1/M.
pub fn verify_prop2(m: usize, trials: usize, ensemble: Ensemble, seed: u64) -> PropStats {
    run_prop_trials(m, trials, ensemble, seed)
}

/// Normalized histogram of off-diagonal feature correlations.
#[derive(Debug, Clone)]
pub struct SimilarityHistogram {
    /// Fractions per bin over [0, 1]; sums to 1 when any pair exists.
    pub bins: Vec<f64>,
    pub pairs: usize,
    /// Channels whose variance was zero (correlation defined as 0).
    pub zero_variance_channels: usize,
}

pub const SIMILARITY_BINS: usize = 20;

/// Flattens each channel of an NCHW activation over (N, H, W), computes the
/// C x C Pearson correlation matrix, and histograms |correlation| of the
/// off-diagonal pairs into `bins` buckets over [0, 1].
#[allow(clippy::needless_range_loop)]
pub fn feature_similarity<T: Real>(
    activations: &Tensor<T>,
    bins: usize,
) -> Result<SimilarityHistogram> {
    let (n, c, h, w) = activations.dims4()?;
    if c < 2 {
        return Err(Error::InvalidArgument(
            "feature similarity needs at least 2 channels".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument(
            "feature similarity: bins >= 1".into(),
        ));
    }
    let hw = h * w;
    let len = n * hw;

    // Per-channel mean and centered vectors.
    let mut mean = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                mean[ch] += activations.data[base + i].to_f64();
            }
        }
    }
    for m in &mut mean {
        *m /= len as f64;
    }
    let mut centered = vec![0.0f64; c * len];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                centered[ch * len + b * hw + i] = activations.data[base + i].to_f64() - mean[ch];
            }
        }
    }
    let norms: Vec<f64> = (0..c)
        .map(|ch| {
            centered[ch * len..(ch + 1) * len]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let zero_variance_channels = norms.iter().filter(|&&v| v == 0.0).count();

    let mut histogram = vec![0.0f64; bins];
    let mut pairs = 0usize;
    for i in 0..c {
        for j in (i + 1)..c {
            let corr = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = centered[i * len..(i + 1) * len]
                    .iter()
                    .zip(&centered[j * len..(j + 1) * len])
                    .map(|(a, b)| a * b)
                    .sum();
                (dot / (norms[i] * norms[j])).abs().min(1.0)
            };
            let bin = ((corr * bins as f64) as usize).min(bins - 1);
            histogram[bin] += 1.0;
            pairs += 1;
        }
    }
    for b in &mut histogram {
        *b /= pairs as f64;
    }
    Ok(SimilarityHistogram {
        bins: histogram,
        pairs,
        zero_variance_channels,
    })
}

/// Least-squares fit of `ln y = a + b ln n`.
#[derive(Debug, Clone, Copy)]
pub struct PowerLawFit {
    /// Intercept in log space (ln of the coefficient).
    pub a: f64,
    /// Exponent.
    pub b: f64,
    pub r_squared: f64,
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "power law fit needs >= 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(n, y)| n <= 0.0 || y <= 0.0) {
        return Err(Error::InvalidArgument(
            "power law fit needs strictly positive coordinates".into(),
        ));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "power law fit: all parameter counts identical".into(),
        ));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let e = y - (a + b * x);
            e * e
        })
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(PowerLawFit { a, b, r_squared })
}
