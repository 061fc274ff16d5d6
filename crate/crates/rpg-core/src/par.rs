//! Data-parallel helpers: rayon when the `parallel` feature is enabled,
//! plain loops otherwise.
//!
//! Every helper partitions work into disjoint output regions (or merges
//! per-shard results in fixed index order), so the parallel and sequential
//! paths produce bit-identical results. [`run_sequential`] forces the
//! sequential path inside a scope regardless of features; the benchmark
//! suite uses it to compare both paths in one binary.

use std::cell::Cell;

thread_local! {
    static SEQ_DEPTH: Cell<u32> = const { Cell::new(0) };
}

struct SeqGuard;

impl Drop for SeqGuard {
    fn drop(&mut self) {
        SEQ_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Runs `f` with all `par` helpers on this thread forced to the sequential path.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    SEQ_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = SeqGuard;
    f()
}

/// True when helpers on this thread will dispatch to rayon.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        SEQ_DEPTH.with(|d| d.get() == 0)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Splits `data` into consecutive chunks of `chunk` elements and runs
/// `f(chunk_index, chunk)` on each. Chunks are disjoint, so any per-chunk
/// write pattern is race-free and order-independent.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_collect_matches_sequential() {
        let par: Vec<u64> = map_collect(1000, |i| (i as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let seq: Vec<u64> =
            run_sequential(|| map_collect(1000, |i| (i as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        assert_eq!(par, seq);
    }

    #[test]
    fn chunked_writes_cover_everything() {
        let mut data = vec![0usize; 37];
        for_each_chunk_mut(&mut data, 5, |i, c| {
            for (k, v) in c.iter_mut().enumerate() {
                *v = i * 5 + k;
            }
        });
        assert_eq!(data, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_scope_restores_parallelism() {
        let before = is_parallel();
        run_sequential(|| assert!(!is_parallel()));
        assert_eq!(is_parallel(), before);
    }
}
