//! Data-parallel helpers with a sequential fallback.
//!
//! With the default `parallel` feature these fan work out over rayon; with
//! `--no-default-features` the same entry points run plain loops. Callers
//! are written so that results are bit-identical either way: workers only
//! write disjoint output slices, and reductions happen in a fixed order
//! outside these helpers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Cap the global worker pool. Safe to call more than once; only the first
/// call wins (rayon initializes its global pool a single time).
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Name of the compiled execution backend, for logs and bench labels.
pub fn backend() -> &'static str {
    if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential"
    }
}

/// Map `0..n` to a vector, preserving index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Split `out` into consecutive `size`-element chunks and run `f(i, chunk)`
/// on each. Chunks are disjoint, so this is deterministic under any
/// scheduling.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(size > 0 && out.len() % size == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map fixed-size chunk indices in parallel, then fold the partial results
/// sequentially in chunk order. `n_items` is split into `ceil(n/chunk)`
/// groups; because the grouping never depends on worker count, the fold
/// order (and therefore float rounding) is stable across thread settings.
pub fn fold_chunked<A, F, G>(n_items: usize, chunk: usize, map: F, mut fold: G) -> Option<A>
where
    A: Send,
    F: Fn(std::ops::Range<usize>) -> A + Send + Sync,
    G: FnMut(A, A) -> A,
{
    if n_items == 0 {
        return None;
    }
    let groups = n_items.div_ceil(chunk);
    let parts = map_indexed(groups, |g| {
        let lo = g * chunk;
        let hi = ((g + 1) * chunk).min(n_items);
        map(lo..hi)
    });
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, p| fold(acc, p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_writes_hit_every_slot() {
        let mut out = vec![0usize; 24];
        for_each_chunk_mut(&mut out, 4, |i, c| c.iter_mut().for_each(|v| *v = i));
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i / 4);
        }
    }

    #[test]
    fn fold_chunked_matches_sequential_sum() {
        let data: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let total = fold_chunked(
            data.len(),
            8,
            |r| r.map(|i| data[i]).sum::<f64>(),
            |a, b| a + b,
        )
        .unwrap();
        // same chunk boundaries, same order
        let mut chunks = data.chunks(8).map(|c| c.iter().sum::<f64>());
        let first = chunks.next().unwrap();
        let expect = chunks.fold(first, |a, b| a + b);
        assert_eq!(total, expect);
    }
}
