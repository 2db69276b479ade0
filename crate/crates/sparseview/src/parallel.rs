//! Deterministic fan-out helpers.
//!
//! Work is split into fixed-size chunks keyed by chunk index; partial results
//! are computed in parallel and reduced in chunk order. The reduction tree is
//! therefore a function of the input alone, never of thread scheduling, so a
//! run with 8 threads is bit-identical to a run with 1.

use rayon::prelude::*;

/// Map `f` over fixed chunks of `0..n` and fold the partials in chunk order.
pub fn chunked_fold<T, F, R>(n: usize, chunk: usize, f: F, mut fold: R, init: T) -> T
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    R: FnMut(T, T) -> T,
{
    assert!(chunk > 0, "chunk size must be positive");
    let partials: Vec<T> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(n);
            f(lo..hi)
        })
        .collect();
    partials.into_iter().fold(init, |acc, p| fold(acc, p))
}

/// Parallel map over `0..n` preserving index order.
pub fn ordered_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
