//! Data-parallel dispatch with a sequential fallback.
//!
//! Everything hot in this crate is parallelized over *disjoint output
//! slabs*: a slab is computed sequentially by exactly one task, and any
//! floating-point reduction happens inside a slab in index order. The
//! parallel and sequential paths therefore produce bit-identical results,
//! which the determinism contracts elsewhere rely on. Building with
//! `--no-default-features` removes the rayon dependency entirely; the
//! `*_seq` entry points below are always compiled and are what the
//! benchmark suite compares against.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to equally sized mutable chunks of `data`, indexed by chunk.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_chunk_mut_seq(data, chunk, f);
    }
}

/// Sequential twin of [`for_each_chunk_mut`].
pub fn for_each_chunk_mut_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map indices `0..n` to values, collected in index order.
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

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
