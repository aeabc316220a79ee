//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps run on the current rayon pool;
//! without it they are plain loops. Either way results come back in index
//! order and reductions are folded sequentially, so outputs are bit-identical
//! for any worker count.

use std::ops::Range;

/// Frames per work unit for chunked reductions. Fixed so that the summation
/// tree does not depend on the thread count.
pub const CHUNK: usize = 32;

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Splits `0..n` into fixed-size chunks, evaluates `f` on each chunk and
/// folds the partial results left to right with `combine`.
pub fn chunked_reduce<A, F, C>(n: usize, chunk: usize, f: F, combine: C) -> Option<A>
where
    A: Send,
    F: Fn(Range<usize>) -> A + Sync + Send,
    C: Fn(A, A) -> A,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let partials = map_indexed(n_chunks, |c| {
        let start = c * chunk;
        f(start..(start + chunk).min(n))
    });
    partials.into_iter().reduce(combine)
}

/// Runs `f` on a pool with `workers` threads (0 = rayon default). Without the
/// `parallel` feature this simply calls `f`.
pub fn with_workers<R: Send, F: FnOnce() -> R + Send>(workers: usize, f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        if workers == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}
