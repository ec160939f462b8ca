//! Ordered parallel map with a sequential fallback.
//!
//! Every parallel region in the crate goes through [`map_collect`]: items are
//! mapped concurrently but the results come back in input order, and all
//! reductions over them happen sequentially afterwards. Output is therefore
//! bit-identical with or without the `parallel` feature and for any thread
//! count.

#[cfg(feature = "parallel")]
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// [`map_collect`] over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map_collect(&idx, |&i| f(i))
}

/// Whether this build evaluates parallel regions on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Fixed chunk length for per-sample reductions; independent of thread count.
pub const SAMPLE_CHUNK: usize = 16;
