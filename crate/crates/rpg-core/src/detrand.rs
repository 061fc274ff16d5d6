//! Bit-exact deterministic randomness.
//!
//! Every transform in this crate is regenerated from stored seeds, so the
//! stream must produce identical bits on every platform and in every
//! language that reimplements it. SplitMix64 fits: single 64-bit state,
//! published constants, pure integer arithmetic.

use crate::error::{Error, Result};

/// SplitMix64 stream state. Advancing is a pure function: the same state
/// always yields the same (output, next state) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    state: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next raw u64 of the published SplitMix64 sequence.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Value in `[0, n)` by modulo reduction; exactly one stream advance.
    ///
    /// The slight modulo bias is irrelevant here: the contract is
    /// determinism, not perfect uniformity.
    #[inline]
    pub fn bounded(&mut self, n: u64) -> Result<u64> {
        if n == 0 {
            return Err(Error::InvalidArgument("bounded: n must be >= 1".into()));
        }
        Ok(self.next_u64() % n)
    }

    /// Uniform f64 in [0, 1) from the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// In-place Fisher–Yates shuffle, walking from the last index down to 1;
/// at index `i` the swap partner is `bounded(i + 1)`.
pub fn shuffle<T>(seq: &mut [T], seed: u64) {
    let mut rng = RngState::new(seed);
    for i in (1..seq.len()).rev() {
        let j = rng.bounded(i as u64 + 1).expect("i + 1 >= 1") as usize;
        seq.swap(i, j);
    }
}

/// `len` random sign factors: element k is -1 iff bit 63 of the k-th
/// stream output is set.
pub fn signs(seed: u64, len: usize) -> Vec<i8> {
    let mut rng = RngState::new(seed);
    (0..len)
        .map(|_| if rng.next_u64() >> 63 == 1 { -1 } else { 1 })
        .collect()
}

/// Samples `count` distinct values from `[0, n)` by a partial Fisher–Yates
/// pass over the index pool.
pub fn sample_distinct(n: usize, count: usize, seed: u64) -> Result<Vec<u32>> {
    if count > n {
        return Err(Error::InvalidArgument(format!(
            "sample_distinct: count {count} exceeds population {n}"
        )));
    }
    let mut pool: Vec<u32> = (0..n as u32).collect();
    let mut rng = RngState::new(seed);
    for k in 0..count {
        let j = k + rng.bounded((n - k) as u64)? as usize;
        pool.swap(k, j);
    }
    pool.truncate(count);
    Ok(pool)
}

/// Fills `out` with i.i.d. standard normal samples via Box–Muller over the
/// stream. Draws are computed in f64 regardless of the target precision so
/// f32 parameters are exact downcasts of the f64 stream.
pub fn fill_standard_normal(out: &mut [f64], seed: u64) {
    let mut rng = RngState::new(seed);
    let mut i = 0;
    while i < out.len() {
        let (z0, z1) = gaussian_pair(&mut rng);
        out[i] = z0;
        i += 1;
        if i < out.len() {
            out[i] = z1;
            i += 1;
        }
    }
}

/// One Box–Muller pair. u1 is mapped into (0, 1] so the log never sees zero.
#[inline]
pub fn gaussian_pair(rng: &mut RngState) -> (f64, f64) {
    let x = rng.next_u64();
    let y = rng.next_u64();
    let u1 = ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (y >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Seed roles derived from one user-facing master seed by fixed offsets.
///
/// Role layout (`n` = node count of the model, `g` = ring group index):
/// - per-node sign seed: `master + 2 + node`
/// - ring group 0 plan: shuffle `master`, extras `master + 1`
/// - ring group g > 0 plan: shuffle/extras at `master + 2 + n + 3g` and `+ 1`
/// - ring group g init: `master + 2 + n + 3g + 2`
/// - direct (non-generated) kernel init for node i: `master + 2 + n + 3G + i`
#[derive(Debug, Clone, Copy)]
pub struct SeedSchedule {
    pub master: u64,
    pub num_nodes: usize,
    pub num_groups: usize,
}

impl SeedSchedule {
    pub fn new(master: u64, num_nodes: usize, num_groups: usize) -> Self {
        Self {
            master,
            num_nodes,
            num_groups,
        }
    }

    pub fn sign_seed(&self, node: usize) -> u64 {
        self.master.wrapping_add(2 + node as u64)
    }

    fn group_base(&self, group: usize) -> u64 {
        self.master
            .wrapping_add(2 + self.num_nodes as u64 + 3 * group as u64)
    }

    pub fn plan_seeds(&self, group: usize) -> (u64, u64) {
        if group == 0 {
            (self.master, self.master.wrapping_add(1))
        } else {
            let base = self.group_base(group);
            (base, base.wrapping_add(1))
        }
    }

    pub fn ring_init_seed(&self, group: usize) -> u64 {
        self.group_base(group).wrapping_add(2)
    }

    pub fn direct_init_seed(&self, node: usize) -> u64 {
        self.master
            .wrapping_add(2 + self.num_nodes as u64 + 3 * self.num_groups as u64 + node as u64)
    }
}
