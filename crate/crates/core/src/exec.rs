//! Order-preserving data-parallel map with a sequential fallback.
//!
//! Built with the `parallel` feature (default), `map_indexed` fans work out
//! over the current rayon pool and collects results in index order, so callers
//! observe identical output regardless of worker count. Without the feature it
//! degrades to a plain sequential map. All reductions over the results happen
//! sequentially at the call sites to keep floating-point sums bit-stable.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Sequential reference path, available under either feature setting.
/// The bench suite uses it to compare against the parallel path.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
