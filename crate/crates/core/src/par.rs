//! Data-parallel building blocks.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Work is split into fixed-size blocks and
//! partial results come back in block order, so floating-point reductions
//! never depend on the thread schedule.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Block length used by every blocked reduction in the crate.
pub const BLOCK: usize = 4096;

/// `f(i)` for `i in 0..n`, in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Splits `0..n` into blocks of [`BLOCK`] and returns `f(block)` for each, in order.
pub fn map_blocks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    map_blocks_sized(n, BLOCK, f)
}

pub fn map_blocks_sized<T, F>(n: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let block = block.max(1);
    let blocks = n.div_ceil(block);
    map_indexed(blocks, |b| {
        let start = b * block;
        f(start..(start + block).min(n))
    })
}

/// Calls `f(chunk_index, chunk)` on consecutive `chunk`-length pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Sum of `f(i)` over `0..n`, reduced block by block in a fixed order.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_blocks(n, |r| r.map(&f).sum::<f64>()).into_iter().sum()
}

/// Runs `f` on a dedicated pool with `threads` workers (0 = rayon default).
///
/// Without the `parallel` feature this just calls `f`.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_cover_range_in_order() {
        let parts = map_blocks_sized(10, 3, |r| r.collect::<Vec<_>>());
        assert_eq!(parts, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9]]);
        assert!(map_blocks(0, |r| r.len()).is_empty());
    }

    #[test]
    fn blocked_sum_independent_of_pool_size() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (i as f64 + 1.0);
        let a = with_threads(1, || sum(100_000, f));
        let b = with_threads(4, || sum(100_000, f));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn chunks_see_their_index() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 4, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
    }
}
