//! Data-parallel helpers with a sequential fallback.
//!
//! Every batch loop in the crate goes through these functions. With the
//! `parallel` feature they fan out over rayon's pool when asked to; without
//! it, or with [`Parallelism::Sequential`], they run on the calling thread.
//! Work is always split into the same index ranges so results that are
//! reduced per chunk do not depend on the number of workers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// True when work will actually be spread across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// `(0..n).map(f).collect()`, optionally in parallel. Output order is index order.
pub fn map_range<T, F>(policy: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive chunks of `chunk_len` items.
pub fn for_each_chunk_mut<T, F>(policy: Parallelism, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = policy;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps fixed-size index ranges `[k·chunk, (k+1)·chunk)` over `0..n`.
pub fn map_chunks<T, F>(policy: Parallelism, n: usize, chunk_len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    let chunks = n.div_ceil(chunk_len);
    map_range(policy, chunks, |k| {
        let start = k * chunk_len;
        f(start..(start + chunk_len).min(n))
    })
}

/// Runs two closures, concurrently when allowed.
pub fn join<A, B, RA, RB>(policy: Parallelism, a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        return rayon::join(a, b);
    }
    let _ = policy;
    (a(), b())
}
